//! Mini-batch training: seeded shuffling, Adam, cosine annealing and the
//! per-epoch log.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, OutfitSample};
use crate::encoders::TransformerConfig;
use crate::error::{Error, Result};
use crate::eval::{Metrics, ScoreConfig, ScoreMode};
use crate::interaction::{LossWeights, TemperatureMode};
use crate::model::{HeadParams, LevelToggles, ModelConfig, Pair};
use crate::numgraph::{Matrix, Real, Tape};
use crate::params::ParamSet;
use crate::style::KMeansConfig;

/// Every training knob in one flat record; this is also the layout of the
/// JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub logit_scale: f64,
    pub temperature_mode: TemperatureMode,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
    pub k_outfit: f64,
    pub k_text: f64,
    pub seed: u64,
    pub item: bool,
    pub style: bool,
    pub outfit: bool,
    pub greedy_init: bool,
    /// Omit wall-clock fields so logs of equal runs compare equal.
    pub reproducible: bool,
    /// Drop the final short batch; otherwise pad it by wrapping around.
    pub drop_last: bool,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Checkpoint interval in epochs; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub share_style_heads: bool,
    pub heads: usize,
    pub ffn_mult: usize,
    pub depth: usize,
    pub allow_depth_override: bool,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,
    pub strict: bool,
    /// Score used when the run is evaluated.
    pub mode: ScoreMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    /// Fine-tuning settings for full-scale data.
    pub fn paper() -> Self {
        let w = LossWeights::default();
        let m = ModelConfig::default();
        Self {
            lr: 5e-7,
            batch_size: 50,
            epochs: 20,
            logit_scale: w.logit_scale,
            temperature_mode: w.temperature_mode,
            p: w.p,
            alpha: w.alpha,
            beta: w.beta,
            k_outfit: m.k_outfit,
            k_text: m.k_text,
            seed: 0,
            item: true,
            style: true,
            outfit: true,
            greedy_init: true,
            reproducible: false,
            drop_last: true,
            clip_norm: None,
            checkpoint_every: 0,
            share_style_heads: m.share_style_heads,
            heads: m.transformer.heads,
            ffn_mult: m.transformer.ffn_mult,
            depth: m.transformer.depth,
            allow_depth_override: m.transformer.allow_depth_override,
            kmeans_max_iter: m.kmeans.max_iter,
            kmeans_tol: m.kmeans.tol,
            strict: false,
            mode: ScoreMode::default(),
        }
    }

    /// Head-only training on small synthetic data.
    pub fn desk() -> Self {
        Self {
            lr: 1e-3,
            ..Self::paper()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected paper or desk)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.loss_weights().validate()?;
        self.model_config(self.heads.max(1)).validate()
    }

    pub fn model_config(&self, dim: usize) -> ModelConfig {
        ModelConfig {
            dim,
            transformer: TransformerConfig {
                heads: self.heads,
                ffn_mult: self.ffn_mult,
                depth: self.depth,
                allow_depth_override: self.allow_depth_override,
            },
            k_outfit: self.k_outfit,
            k_text: self.k_text,
            share_style_heads: self.share_style_heads,
            greedy_init: self.greedy_init,
            init_seed: self.seed,
            kmeans: KMeansConfig {
                max_iter: self.kmeans_max_iter,
                tol: self.kmeans_tol,
            },
            strict: self.strict,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            logit_scale: self.logit_scale,
            temperature_mode: self.temperature_mode,
            p: self.p,
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn toggles(&self) -> LevelToggles {
        LevelToggles {
            item: self.item,
            style: self.style,
            outfit: self.outfit,
        }
    }

    pub fn score_config(&self) -> ScoreConfig {
        ScoreConfig::new(self.mode, &self.loss_weights(), &self.toggles())
    }
}

/// Cosine-annealed learning rate for 0-based `epoch` of `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    (lr0 * 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos())).max(0.0)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Matrix<T>>,
    pub v: Vec<Matrix<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        Self {
            step: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn for_params(params: &impl ParamSet<T>) -> Self {
        let shapes: Vec<_> = params.tensors().iter().map(|(_, m)| m.shape()).collect();
        Self::new(&shapes)
    }
}

/// One bias-corrected Adam update. Gradients are checked for finiteness
/// before anything is modified; `names` labels the offending tensor.
pub fn adam_step<T: Real>(
    params: &mut [&mut Matrix<T>],
    grads: &[Matrix<T>],
    names: &[String],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::InvalidArgument(format!(
            "adam: {n} parameters, {} gradients, {} moment tensors",
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        if p.shape() != g.shape() || state.m[i].shape() != g.shape() {
            return Err(Error::shape(
                "adam",
                format!("{name}: parameter {:?}, gradient {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let (one, eps) = (T::one(), T::lit(ADAM_EPS));
    let (c1, c2, lr) = (T::lit(c1), T::lit(c2), T::lit(lr));
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (k, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[k] = b1 * m[k] + (one - b1) * g[k];
            v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.as_mut_slice().iter_mut().for_each(|v| *v = *v * s);
        }
    }
    norm
}

/// Losses of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLosses {
    pub total: f64,
    pub item: f64,
    pub style: f64,
    pub outfit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    pub mean_total: f64,
    pub mean_item: f64,
    pub mean_style: f64,
    pub mean_outfit: f64,
    pub batch_totals: Vec<f64>,
    pub batch_item: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub epochs: Vec<EpochRecord>,
    pub aborted: Option<String>,
    pub final_metrics: Option<Metrics>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum LogLine {
    Config {
        config: TrainConfig,
        model: ModelConfig,
    },
    Epoch(EpochRecord),
    Summary {
        aborted: Option<String>,
        final_metrics: Option<Metrics>,
    },
}

impl TrainLog {
    pub fn new(config: TrainConfig, model: ModelConfig) -> Self {
        Self {
            config,
            model,
            epochs: Vec::new(),
            aborted: None,
            final_metrics: None,
        }
    }

    /// One JSON object per line: the run header, each epoch, then a summary.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut lines = vec![LogLine::Config {
            config: self.config.clone(),
            model: self.model,
        }];
        lines.extend(self.epochs.iter().cloned().map(LogLine::Epoch));
        lines.push(LogLine::Summary {
            aborted: self.aborted.clone(),
            final_metrics: self.final_metrics,
        });
        let mut out = String::new();
        for l in &lines {
            let s = serde_json::to_string(l).map_err(|e| Error::json("<train log>", e))?;
            out.push_str(&s);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut log: Option<TrainLog> = None;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogLine = serde_json::from_str(line)
                .map_err(|e| Error::json(format!("<train log line {}>", n + 1), e))?;
            match (rec, &mut log) {
                (LogLine::Config { config, model }, None) => log = Some(TrainLog::new(config, model)),
                (LogLine::Epoch(e), Some(l)) => l.epochs.push(e),
                (LogLine::Summary { aborted, final_metrics }, Some(l)) => {
                    l.aborted = aborted;
                    l.final_metrics = final_metrics;
                }
                _ => return Err(Error::Config(format!("train log line {} is out of order", n + 1))),
            }
        }
        log.ok_or_else(|| Error::Config("train log is empty".into()))
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }
}

/// Owns the parameters and optimizer state of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: HeadParams<f32>,
    pub optimizer: AdamState<f32>,
    pub epochs_done: usize,
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: TrainConfig, dim: usize) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(dim);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = HeadParams::init(&model, &mut rng)?;
        let optimizer = AdamState::for_params(&params);
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            epochs_done: 0,
        })
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(
        config: TrainConfig,
        params: HeadParams<f32>,
        optimizer: Option<AdamState<f32>>,
        epochs_done: usize,
    ) -> Result<Self> {
        config.validate()?;
        let model = config.model_config(params.dim());
        let optimizer = optimizer.unwrap_or_else(|| AdamState::for_params(&params));
        if optimizer.m.len() != params.tensors().len() {
            return Err(Error::Config(
                "optimizer state does not match the parameter layout".into(),
            ));
        }
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            epochs_done,
        })
    }

    /// Sample order of every batch of `epoch` over `n` samples.
    pub fn batch_plan(&self, n: usize, epoch: usize) -> Result<Vec<Vec<usize>>> {
        if n < 2 {
            return Err(Error::InvalidArgument(format!(
                "contrastive training needs at least 2 samples, got {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let b = self.config.batch_size;
        if n <= b {
            return Ok(vec![order]);
        }
        let mut batches: Vec<Vec<usize>> = order.chunks(b).map(<[usize]>::to_vec).collect();
        if batches.last().is_some_and(|l| l.len() < b) {
            let last = batches.pop().expect("nonempty");
            if !self.config.drop_last {
                let fill = b - last.len();
                let mut padded = last;
                padded.extend_from_slice(&order[..fill]);
                batches.push(padded);
            }
        }
        Ok(batches)
    }

    /// One forward/backward pass and Adam update on `samples`.
    pub fn step(&mut self, samples: &[&OutfitSample], lr: f64) -> Result<BatchLosses> {
        let pairs: Vec<Pair<'_, f32>> = samples.iter().map(|s| s.pair()).collect();
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let out = bound.forward(
            &mut tape,
            &self.model,
            &self.config.loss_weights(),
            &self.config.toggles(),
            &pairs,
        )?;
        let scalar = |v: Option<crate::numgraph::Var>| {
            v.map(|v| f64::from(tape.value(v).item())).unwrap_or(0.0)
        };
        let losses = BatchLosses {
            total: scalar(Some(out.total)),
            item: scalar(out.item_loss),
            style: scalar(out.style_loss),
            outfit: scalar(out.outfit_loss),
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epochs_done,
                batch: 0,
            });
        }
        let grads = tape.gradients(out.total)?;
        let named = self.params.tensors();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let mut g: Vec<Matrix<f32>> = named
            .iter()
            .enumerate()
            .map(|(id, (_, m))| {
                grads
                    .param(id)
                    .unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()))
            })
            .collect();
        drop(named);
        if let Some(c) = self.config.clip_norm {
            if g.iter().all(Matrix::is_finite) {
                clip_global_norm(&mut g, c);
            }
        }
        let mut tensors = self.params.tensors_mut();
        adam_step(&mut tensors, &g, &names, &mut self.optimizer, lr)?;
        Ok(losses)
    }

    /// Trains one epoch. On divergence the parameters stay at the state
    /// after the last finite batch.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochRecord> {
        let start = Instant::now();
        let epoch = self.epochs_done;
        let lr = cosine_lr(epoch, self.config.epochs, self.config.lr);
        let plan = self.batch_plan(data.len(), epoch)?;
        let mut losses = Vec::with_capacity(plan.len());
        for (b, idx) in plan.iter().enumerate() {
            let batch: Vec<&OutfitSample> = idx.iter().map(|&i| &data.samples[i]).collect();
            let l = self.step(&batch, lr).map_err(|e| match e {
                Error::Diverged { .. } => Error::Diverged { epoch, batch: b },
                other => other,
            })?;
            log::debug!("epoch {epoch} batch {b}: loss {:.6}", l.total);
            losses.push(l);
        }
        self.epochs_done += 1;
        let mean = |f: fn(&BatchLosses) -> f64| {
            if losses.is_empty() {
                0.0
            } else {
                losses.iter().map(f).sum::<f64>() / losses.len() as f64
            }
        };
        Ok(EpochRecord {
            epoch,
            lr,
            batches: losses.len(),
            mean_total: mean(|l| l.total),
            mean_item: mean(|l| l.item),
            mean_style: mean(|l| l.style),
            mean_outfit: mean(|l| l.outfit),
            batch_totals: losses.iter().map(|l| l.total).collect(),
            batch_item: losses.iter().map(|l| l.item).collect(),
            wall_seconds: (!self.config.reproducible).then(|| start.elapsed().as_secs_f64()),
        })
    }

    /// Runs the remaining epochs. `on_epoch` sees the trainer after every
    /// completed epoch (checkpointing hooks in here). A divergence ends the
    /// run early and is recorded in the log instead of being returned.
    pub fn run(
        &mut self,
        data: &Dataset,
        mut on_epoch: impl FnMut(&Trainer, &EpochRecord) -> Result<()>,
    ) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if data.dim != self.model.dim {
            return Err(Error::DimMismatch {
                left: data.dim,
                right: self.model.dim,
                context: "dataset width vs model width".into(),
            });
        }
        let mut log = TrainLog::new(self.config.clone(), self.model);
        while self.epochs_done < self.config.epochs {
            match self.run_epoch(data) {
                Ok(rec) => {
                    log::info!(
                        "epoch {}/{}: lr {:.3e} loss {:.5} (item {:.5} style {:.5} outfit {:.5})",
                        rec.epoch + 1,
                        self.config.epochs,
                        rec.lr,
                        rec.mean_total,
                        rec.mean_item,
                        rec.mean_style,
                        rec.mean_outfit
                    );
                    on_epoch(self, &rec)?;
                    log.epochs.push(rec);
                }
                Err(e @ (Error::Diverged { .. } | Error::NonFiniteGradient(_))) => {
                    log::error!("{e}");
                    log.aborted = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        Ok(log)
    }
}

/// Trains fresh parameters on every sample of `data`.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(HeadParams<f32>, TrainLog)> {
    let mut t = Trainer::new(config.clone(), data.dim)?;
    let log = t.run(data, |_, _| Ok(()))?;
    Ok((t.params, log))
}
