use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stylematch::checkpoint::Checkpoint;
use stylematch::data::{synth_generate, Dataset, OutfitSample, Split, SynthConfig};
use stylematch::eval::{
    evaluate, export_interactions, inference_score, interactions, recall_at_k, RetrievalResult,
    ScoreConfig, ScoreMode,
};
use stylematch::model::{HeadParams, ModelConfig};
use stylematch::numgraph::Matrix;
use stylematch::style::cluster_count;
use stylematch::train::Trainer;

fn identity_head(cfg: &ModelConfig) -> HeadParams<f64> {
    let mut p = HeadParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    for enc in [
        &mut p.outfit_style_encoder,
        &mut p.text_style_encoder,
        &mut p.outfit_global_encoder,
        &mut p.text_global_encoder,
    ] {
        for l in &mut enc.layers {
            for m in [&mut l.wo, &mut l.w2, &mut l.b2] {
                m.as_mut_slice().fill(0.0);
            }
        }
    }
    p
}

fn small_model(dim: usize) -> ModelConfig {
    let mut m = ModelConfig {
        dim,
        ..ModelConfig::default()
    };
    m.transformer.heads = 2;
    m
}

fn sample(id: &str, items: Vec<Vec<f32>>, tokens: Vec<Vec<f32>>) -> OutfitSample {
    OutfitSample {
        outfit_id: id.into(),
        item_ids: (0..items.len()).map(|i| format!("{id}_{i}")).collect(),
        e_o: Matrix::from_rows(&items),
        token_strings: (0..tokens.len()).map(|j| format!("w{j}")).collect(),
        e_t: Matrix::from_rows(&tokens),
        split: Split::Test,
    }
}

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    ab / (aa * bb).sqrt()
}

fn rows64(m: &Matrix<f32>) -> Vec<Vec<f64>> {
    m.iter_rows()
        .map(|r| r.iter().map(|&v| f64::from(v)).collect())
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    (0..d)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
        .collect()
}

fn uniform_wti(o: &[Vec<f64>], t: &[Vec<f64>], p: f64) -> f64 {
    let t2o = o
        .iter()
        .map(|a| t.iter().map(|b| cos(a, b)).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / o.len() as f64;
    let o2t = t
        .iter()
        .map(|b| o.iter().map(|a| cos(a, b)).fold(f64::MIN, f64::max))
        .sum::<f64>()
        / t.len() as f64;
    (t2o + p * o2t) / (1.0 + p)
}

fn mode_cfg(mode: ScoreMode, p: f64) -> ScoreConfig {
    ScoreConfig {
        mode,
        p,
        ..ScoreConfig::default()
    }
}

#[test]
fn identical_single_pair_scores_one_per_level() {
    let m = small_model(4);
    let params = identity_head(&m);
    let s = sample("a", vec![vec![0.3, -1.2, 0.5, 2.0]], vec![vec![0.3, -1.2, 0.5, 2.0]]);
    for mode in [ScoreMode::ItemT2o, ScoreMode::ItemFull] {
        let v = inference_score(&s, &s, &params, &m, &mode_cfg(mode, 0.2)).unwrap();
        assert_eq!(v, 1.0, "{mode}");
    }
    let ex = interactions(&s, &s, &params, &m, &ScoreConfig::default()).unwrap();
    assert_eq!(ex.scores.style, 1.0);
    assert!((ex.scores.outfit - 1.0).abs() < 1e-6);
    let combined = inference_score(&s, &s, &params, &m, &mode_cfg(ScoreMode::Combined, 0.2)).unwrap();
    assert!((combined - (1.0 + 0.3 + 0.3)).abs() < 1e-6);
}

#[test]
fn item_full_with_zero_p_is_item_t2o() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let m = small_model(6);
    let params: HeadParams<f64> = HeadParams::init(&m, &mut rng).unwrap();
    for i in 0..25 {
        let (no, nt) = (rng.random_range(1..8), rng.random_range(1..8));
        let o = sample(&format!("o{i}"), random_rows(no, 6, &mut rng), random_rows(1, 6, &mut rng));
        let t = sample(&format!("t{i}"), random_rows(1, 6, &mut rng), random_rows(nt, 6, &mut rng));
        let a = inference_score(&t, &o, &params, &m, &mode_cfg(ScoreMode::ItemFull, 0.0)).unwrap();
        let b = inference_score(&t, &o, &params, &m, &mode_cfg(ScoreMode::ItemT2o, 0.0)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn combined_matches_per_level_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut m = small_model(6);
    m.k_outfit = 1.0;
    m.k_text = 0.1;
    let params = identity_head(&m);
    let s = sample("x", random_rows(5, 6, &mut rng), random_rows(7, 6, &mut rng));
    let cfg = ScoreConfig {
        mode: ScoreMode::Combined,
        p: 0.2,
        alpha: 0.3,
        beta: 0.3,
    };
    let got = inference_score(&s, &s, &params, &m, &cfg).unwrap();

    let o = rows64(&s.e_o);
    let t = rows64(&s.e_t);
    let item = uniform_wti(&o, &t, 0.2);
    let o_styles: Vec<Vec<f64>> = o.iter().map(|r| unit(r)).collect();
    let t_units: Vec<Vec<f64>> = t.iter().map(|r| unit(r)).collect();
    let t_styles = vec![mean(&t_units)];
    let style = uniform_wti(&o_styles, &t_styles, 0.2);
    let outfit = cos(&mean(&o_styles), &mean(&t_styles));
    let want = item + 0.3 * style + 0.3 * outfit;
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn noiseless_planting_retrieves_within_top_five() {
    let cfg = SynthConfig {
        sigma: 0.0,
        ..SynthConfig::default()
    };
    let (data, _) = synth_generate(&cfg).unwrap();
    for s in &data.samples {
        for tok in s.e_t.iter_rows() {
            let copy = s.e_o.iter_rows().any(|it| it == tok);
            let label = &s.token_strings[s.e_t.iter_rows().position(|r| r == tok).unwrap()];
            assert!(copy || label.ends_with(":noise"), "{}: {label}", s.outfit_id);
        }
    }
    let test = data.split(Split::Test);
    let m = ModelConfig::default();
    let params: HeadParams<f32> = HeadParams::init(&m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ev = evaluate(&test, &params, &m, &ScoreConfig::default()).unwrap();
    assert_eq!(ev.metrics.r5, 1.0);
}

#[test]
fn noiseless_without_distractors_tokens_nearest_own_outfit() {
    let cfg = SynthConfig {
        sigma: 0.0,
        distractor_rate: 0.0,
        outfits: 60,
        ..SynthConfig::default()
    };
    let (data, _) = synth_generate(&cfg).unwrap();
    for s in &data.samples {
        for tok in s.e_t.iter_rows() {
            assert!(s.e_o.iter_rows().any(|it| it == tok));
        }
    }
}

#[test]
fn duplicate_candidates_tie_break_by_id() {
    let items = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]];
    let tokens = vec![vec![1.0, 0.1, 0.0]];
    let samples = vec![
        sample("zeta", items.clone(), tokens.clone()),
        sample("alpha", items.clone(), tokens.clone()),
        sample("mid", items, tokens),
    ];
    let data = Dataset::new(3, samples).unwrap();
    let mut m = small_model(3);
    m.transformer.heads = 1;
    let params: HeadParams<f32> = HeadParams::init(&m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ev = evaluate(&data, &params, &m, &ScoreConfig::default()).unwrap();
    for r in &ev.results {
        let ids: Vec<&str> = r.ranked.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, vec!["alpha", "mid", "zeta"]);
    }
    let ranks: Vec<_> = ev.results.iter().map(|r| r.gt_rank.unwrap()).collect();
    assert_eq!(ranks, vec![3, 1, 2]);
}

#[test]
fn random_scores_follow_the_permutation_null() {
    let (q, c) = (400usize, 100usize);
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let results: Vec<RetrievalResult> = (0..q)
            .map(|i| {
                let scores = (0..c)
                    .map(|j| (format!("c{j:03}"), rng.random::<f64>()))
                    .collect();
                RetrievalResult::new(format!("c{:03}", i % c), scores)
            })
            .collect();
        for (k, r) in recall_at_k(&results, &[5, 10, 30, 50]).unwrap() {
            let pk = k as f64 / c as f64;
            let sd = (pk * (1.0 - pk) / q as f64).sqrt();
            assert!((r - pk).abs() <= 3.0 * sd, "seed {seed} k {k}: {r} vs {pk}");
        }
    }
}

#[test]
fn export_matches_scoring_internals() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut m = small_model(8);
    m.k_text = 0.5;
    let params: HeadParams<f32> = HeadParams::init(&m, &mut rng).unwrap();
    let o = sample("o", random_rows(7, 8, &mut rng), random_rows(1, 8, &mut rng));
    let t = sample("t", random_rows(1, 8, &mut rng), random_rows(5, 8, &mut rng));
    let cfg = ScoreConfig::default();
    let ex = interactions(&t, &o, &params, &m, &cfg).unwrap();
    let score = inference_score(&t, &o, &params, &m, &cfg).unwrap();
    assert!((ex.scores.score - f64::from(score)).abs() < 1e-6);

    assert_eq!(ex.item_matrix.len(), 7);
    assert!(ex.item_matrix.iter().all(|r| r.len() == 5));
    let t2o: f64 = ex
        .item_matrix
        .iter()
        .zip(&ex.item_weights)
        .map(|(row, w)| w * row.iter().copied().fold(f64::MIN, f64::max))
        .sum();
    assert!((t2o - ex.scores.item_t2o).abs() < 1e-6);
    let o2t: f64 = (0..5)
        .map(|j| {
            ex.token_weights[j] * ex.item_matrix.iter().map(|r| r[j]).fold(f64::MIN, f64::max)
        })
        .sum();
    assert!(((t2o + 0.2 * o2t) / 1.2 - ex.scores.item_full).abs() < 1e-6);

    let (co, ct) = (cluster_count(7, m.k_outfit), cluster_count(5, m.k_text));
    assert_eq!((co, ct), (2, 2));
    assert_eq!(ex.style_matrix.len(), co);
    assert!(ex.style_matrix.iter().all(|r| r.len() == ct));
    assert_eq!(ex.outfit_clusters.iter().map(Vec::len).sum::<usize>(), 7);
    assert_eq!(ex.text_clusters.iter().map(Vec::len).sum::<usize>(), 5);

    let dir = tempfile::tempdir().unwrap();
    let paths = export_interactions(&ex, dir.path().join("pair")).unwrap();
    let mut rdr = csv::Reader::from_path(&paths.item_csv).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 6);
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(&rows[2][0], "o_2");
    let v: f64 = rows[2][3].parse().unwrap();
    assert!((v - ex.item_matrix[2][2]).abs() < 1e-12);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&paths.json).unwrap()).unwrap();
    assert_eq!(json["outfit_id"], "o");
    let style_rows = csv::Reader::from_path(&paths.style_csv).unwrap().records().count();
    assert_eq!(style_rows, co);
}

#[test]
fn single_item_single_token_export_is_cosine() {
    let mut m = small_model(3);
    m.transformer.heads = 1;
    let params: HeadParams<f32> = HeadParams::init(&m, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let s = sample("s", vec![vec![1.0, 2.0, 2.0]], vec![vec![2.0, 0.0, 1.0]]);
    let ex = interactions(&s, &s, &params, &m, &ScoreConfig::default()).unwrap();
    let want = cos(&[1.0, 2.0, 2.0], &[2.0, 0.0, 1.0]);
    assert_eq!(ex.item_matrix.len(), 1);
    assert!((ex.item_matrix[0][0] - want).abs() < 1e-6);
}

#[test]
fn checkpoint_round_trip_preserves_metrics() {
    let (data, _) = synth_generate(&SynthConfig {
        outfits: 40,
        dim: 8,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let cfg = stylematch::train::TrainConfig {
        heads: 2,
        epochs: 1,
        batch_size: 10,
        ..stylematch::train::TrainConfig::desk()
    };
    let mut t = Trainer::new(cfg, 8).unwrap();
    t.run(&data.split(Split::Train), |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    Checkpoint::from_trainer(&t, true).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    for mode in [ScoreMode::ItemT2o, ScoreMode::Combined] {
        let sc = ScoreConfig {
            mode,
            ..t.config.score_config()
        };
        let a = evaluate(&data, &t.params, &t.model, &sc).unwrap();
        let b = evaluate(&data, &back.params, &back.model, &sc).unwrap();
        assert_eq!(a, b);
    }
}
