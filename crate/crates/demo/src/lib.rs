//! Browser bindings for three small views into `stylematch`: clustering a
//! point cloud the way style tokens are extracted, the token interaction
//! heatmaps of one synthetic outfit, and how the contrastive loss and the
//! learning-rate schedule respond to their knobs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stylematch::data::{synth_generate, SynthConfig};
use stylematch::eval::{interactions, InteractionExport, ScoreConfig, ScoreMode};
use stylematch::interaction::{info_nce_directions, LossWeights};
use stylematch::model::{HeadParams, LevelToggles};
use stylematch::numgraph::Matrix;
use stylematch::style::{cluster_count, greedy_init, kmeans, random_init, KMeansConfig};
use stylematch::train::{cosine_lr, TrainConfig};
use stylematch::{Error, Result};
use wasm_bindgen::prelude::*;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterView {
    pub clusters: usize,
    pub seeds: Vec<usize>,
    pub degenerate: bool,
    pub assignments: Vec<usize>,
    pub centroids: Vec<[f64; 2]>,
    pub iterations: usize,
    pub objective: Vec<f64>,
}

/// Clusters 2-D points into `max(floor(ratio n), 1)` groups.
pub fn cluster_points(points: &[[f64; 2]], ratio: f64, greedy: bool, seed: u64) -> Result<ClusterView> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no points to cluster".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {ratio} outside (0, 1]")));
    }
    let x = Matrix::from_rows(points);
    let c = cluster_count(points.len(), ratio);
    let (seeds, degenerate) = if greedy {
        let g = greedy_init(&x, c)?;
        (g.indices, g.degenerate)
    } else {
        (random_init(points.len(), c, seed)?, false)
    };
    let r = kmeans(&x, &x.select_rows(&seeds), &KMeansConfig::default())?;
    Ok(ClusterView {
        clusters: c,
        seeds,
        degenerate,
        assignments: r.assignments,
        centroids: r.centroids.iter_rows().map(|row| [row[0], row[1]]).collect(),
        iterations: r.iterations,
        objective: r.objective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRequest {
    pub seed: u64,
    /// Description taken from this outfit (index into the generated set).
    pub query: usize,
    pub outfit: usize,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mode: ScoreMode,
}

impl Default for HeatmapRequest {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 7,
            query: 0,
            outfit: 0,
            p: w.p,
            alpha: w.alpha,
            beta: w.beta,
            mode: ScoreMode::Combined,
        }
    }
}

pub const HEATMAP_OUTFITS: usize = 6;
pub const HEATMAP_DIM: usize = 16;

/// Generates a handful of synthetic outfits and scores one description
/// against one outfit with freshly initialized heads.
pub fn heatmap(req: &HeatmapRequest) -> Result<InteractionExport> {
    let synth = SynthConfig {
        outfits: HEATMAP_OUTFITS,
        archetypes: 8,
        items_min: 4,
        items_max: 9,
        tokens_min: 4,
        tokens_max: 9,
        dim: HEATMAP_DIM,
        seed: req.seed,
        ..SynthConfig::default()
    };
    let (data, _) = synth_generate(&synth)?;
    let pick = |i: usize| {
        data.samples
            .get(i)
            .ok_or_else(|| Error::InvalidArgument(format!("outfit index {i} out of range")))
    };
    let (text, outfit) = (pick(req.query)?, pick(req.outfit)?);

    let train = TrainConfig {
        heads: 2,
        seed: req.seed,
        ..TrainConfig::default()
    };
    let model = train.model_config(HEATMAP_DIM);
    let params = HeadParams::<f32>::init(&model, &mut ChaCha8Rng::seed_from_u64(req.seed))?;
    let weights = LossWeights {
        p: req.p,
        alpha: req.alpha,
        beta: req.beta,
        ..LossWeights::default()
    };
    weights.validate()?;
    let cfg = ScoreConfig::new(req.mode, &weights, &LevelToggles::default());
    interactions(text, outfit, &params, &model, &cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRequest {
    pub batch: usize,
    /// Similarity of each matching pair.
    pub positive: f64,
    /// Similarity of every mismatched pair.
    pub negative: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub points: usize,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for CurveRequest {
    fn default() -> Self {
        Self {
            batch: 32,
            positive: 0.6,
            negative: 0.4,
            scale_min: 1.0,
            scale_max: 1000.0,
            points: 60,
            epochs: 50,
            lr: 5e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub scale: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Curves {
    pub loss: Vec<CurvePoint>,
    /// Loss of a batch whose similarities carry no signal.
    pub chance: f64,
    pub lr: Vec<f64>,
}

/// Symmetric InfoNCE of a batch with constant on- and off-diagonal
/// similarities over a log-spaced sweep of the logit scale, plus the
/// per-epoch learning rates.
pub fn curves(req: &CurveRequest) -> Result<Curves> {
    if req.batch == 0 || req.points < 2 {
        return Err(Error::InvalidArgument("need a batch and at least two points".into()));
    }
    if !(req.scale_min > 0.0 && req.scale_max > req.scale_min) {
        return Err(Error::InvalidArgument("scale range must be positive and increasing".into()));
    }
    let b = req.batch;
    let mut s = Matrix::filled(b, b, req.negative);
    for i in 0..b {
        s.row_mut(i)[i] = req.positive;
    }
    let (lo, hi) = (req.scale_min.ln(), req.scale_max.ln());
    let loss = (0..req.points)
        .map(|i| {
            let scale = (lo + (hi - lo) * i as f64 / (req.points - 1) as f64).exp();
            let (a, c) = info_nce_directions(&s, scale)?;
            Ok(CurvePoint { scale, loss: a + c })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Curves {
        loss,
        chance: 2.0 * (b as f64).ln(),
        lr: (0..req.epochs).map(|e| cosine_lr(e, req.epochs, req.lr)).collect(),
    })
}

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json<S: Serialize>(v: &S) -> std::result::Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

/// `points_json` is an array of `[x, y]` pairs. Returns the clustering as JSON.
#[wasm_bindgen(js_name = clusterPoints)]
pub fn cluster_points_js(
    points_json: &str,
    ratio: f64,
    greedy: bool,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    let points: Vec<[f64; 2]> = serde_json::from_str(points_json).map_err(js_err)?;
    to_json(&cluster_points(&points, ratio, greedy, seed as u64).map_err(js_err)?)
}

/// `request_json` holds any subset of the heatmap request fields.
#[wasm_bindgen(js_name = interactionHeatmap)]
pub fn heatmap_js(request_json: &str) -> std::result::Result<String, JsValue> {
    let req = merged::<HeatmapRequest>(request_json)?;
    to_json(&heatmap(&req).map_err(js_err)?)
}

/// `request_json` holds any subset of the curve request fields.
#[wasm_bindgen(js_name = lossCurves)]
pub fn curves_js(request_json: &str) -> std::result::Result<String, JsValue> {
    let req = merged::<CurveRequest>(request_json)?;
    to_json(&curves(&req).map_err(js_err)?)
}

fn merged<R>(overrides: &str) -> std::result::Result<R, JsValue>
where
    R: Default + Serialize + for<'de> Deserialize<'de>,
{
    parse_merged(overrides).map_err(js_err)
}

/// Overlays the fields present in `overrides` onto `R::default()`.
pub fn parse_merged<R>(overrides: &str) -> std::result::Result<R, serde_json::Error>
where
    R: Default + Serialize + for<'de> Deserialize<'de>,
{
    let mut base = serde_json::to_value(R::default())?;
    let patch: serde_json::Value = serde_json::from_str(overrides)?;
    if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
        for (k, v) in p {
            b.insert(k.clone(), v.clone());
        }
    }
    serde_json::from_value(base)
}
