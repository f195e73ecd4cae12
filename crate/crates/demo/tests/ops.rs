use stylematch::eval::ScoreMode;
use stylematch_demo::{cluster_points, curves, heatmap, parse_merged, CurveRequest, HeatmapRequest, HEATMAP_OUTFITS};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * (1.0 + b.abs())
}

#[test]
fn three_pairs_split_into_their_pairs() {
    let pts = [[0.0, 0.0], [0.0, 1.0], [5.0, 5.0], [5.0, 6.0], [9.0, 0.0], [9.0, 1.0]];
    for greedy in [true, false] {
        let v = cluster_points(&pts, 0.5, greedy, 3).unwrap();
        assert_eq!(v.clusters, 3);
        let a = &v.assignments;
        assert!(a[0] == a[1] && a[2] == a[3] && a[4] == a[5], "greedy={greedy}: {a:?}");
        let mut cs = v.centroids.clone();
        cs.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(cs, vec![[0.0, 0.5], [5.0, 5.5], [9.0, 0.5]]);
        assert!(close(*v.objective.last().unwrap(), 1.5, 1e-12));
    }
}

#[test]
fn greedy_seeds_start_from_the_most_remote_point() {
    let pts = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [10.0, 0.0]];
    let v = cluster_points(&pts, 0.5, true, 0).unwrap();
    assert_eq!(v.seeds, vec![3, 0]);
    assert_eq!(v.assignments, vec![1, 1, 1, 0]);
}

#[test]
fn clustering_rejects_bad_input() {
    assert!(cluster_points(&[], 0.5, true, 0).is_err());
    assert!(cluster_points(&[[0.0, 0.0]], 0.0, true, 0).is_err());
    assert!(cluster_points(&[[0.0, 0.0]], 1.5, true, 0).is_err());
    assert_eq!(cluster_points(&[[0.0, 0.0]], 0.1, true, 0).unwrap().clusters, 1);
}

#[test]
fn loss_curve_matches_closed_form() {
    let req = CurveRequest { batch: 8, positive: 0.7, negative: 0.2, points: 5, ..CurveRequest::default() };
    let c = curves(&req).unwrap();
    assert_eq!(c.loss.len(), 5);
    assert!(close(c.loss[0].scale, 1.0, 1e-12) && close(c.loss[4].scale, 1000.0, 1e-9));
    for p in &c.loss {
        let one_direction = (1.0 + 7.0 * (p.scale * (0.2 - 0.7)).exp()).ln();
        assert!(close(p.loss, 2.0 * one_direction, 1e-9), "{p:?}");
    }
    assert!(c.loss.windows(2).all(|w| w[1].loss <= w[0].loss));
}

#[test]
fn equal_similarities_sit_at_chance() {
    let req = CurveRequest { batch: 5, positive: 0.3, negative: 0.3, ..CurveRequest::default() };
    let c = curves(&req).unwrap();
    assert!(close(c.chance, 2.0 * 5f64.ln(), 1e-15));
    assert!(c.loss.iter().all(|p| close(p.loss, c.chance, 1e-9)));
}

#[test]
fn schedule_is_cosine() {
    let req = CurveRequest { epochs: 4, lr: 1.0, ..CurveRequest::default() };
    let lr = curves(&req).unwrap().lr;
    let want = [1.0, 0.5 + 0.5 * 0.5f64.sqrt(), 0.5, 0.5 - 0.5 * 0.5f64.sqrt()];
    for (a, b) in lr.iter().zip(want) {
        assert!(close(*a, b, 1e-12), "{lr:?}");
    }
}

#[test]
fn curves_reject_bad_ranges() {
    assert!(curves(&CurveRequest { batch: 0, ..CurveRequest::default() }).is_err());
    assert!(curves(&CurveRequest { scale_min: 0.0, ..CurveRequest::default() }).is_err());
    assert!(curves(&CurveRequest { scale_max: 0.5, ..CurveRequest::default() }).is_err());
}

#[test]
fn heatmap_shapes_and_scores_agree() {
    let req = HeatmapRequest { query: 2, outfit: 3, ..HeatmapRequest::default() };
    let h = heatmap(&req).unwrap();
    assert_eq!(h.item_matrix.len(), h.item_ids.len());
    assert!(h.item_matrix.iter().all(|r| r.len() == h.token_strings.len()));
    assert_eq!(h.style_matrix.len(), h.outfit_clusters.len());
    assert_eq!(h.text_clusters.iter().map(Vec::len).sum::<usize>(), h.token_strings.len());
    assert!(h.item_matrix.iter().flatten().all(|v| (-1.0 - 1e-6..=1.0 + 1e-6).contains(v)));
    let s = h.scores;
    let want = s.item_full + req.alpha * s.style + req.beta * s.outfit;
    assert!(close(s.combined, want, 1e-5));
    assert_eq!(s.score, s.combined);

    let t2o = heatmap(&HeatmapRequest { mode: ScoreMode::ItemT2o, ..req }).unwrap();
    assert_eq!(t2o.scores.score, t2o.scores.item_t2o);
    assert_eq!(t2o.item_matrix, h.item_matrix);
}

#[test]
fn heatmap_is_deterministic_and_bounds_checked() {
    let req = HeatmapRequest::default();
    assert_eq!(heatmap(&req).unwrap(), heatmap(&req).unwrap());
    assert!(heatmap(&HeatmapRequest { outfit: HEATMAP_OUTFITS, ..req }).is_err());
    assert!(heatmap(&HeatmapRequest { p: -1.0, ..req }).is_err());
}

#[test]
fn partial_requests_fill_from_defaults() {
    let r: HeatmapRequest = parse_merged(r#"{"outfit": 4, "mode": "item-full"}"#).unwrap();
    assert_eq!(r, HeatmapRequest { outfit: 4, mode: ScoreMode::ItemFull, ..HeatmapRequest::default() });
    let c: CurveRequest = parse_merged("{}").unwrap();
    assert_eq!(c, CurveRequest::default());
    assert!(parse_merged::<CurveRequest>(r#"{"batch": "x"}"#).is_err());
}
