//! Saved runs: configuration, parameters and optional optimizer state.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadParams, ModelConfig};
use crate::params::ParamSet;
use crate::train::{AdamState, TrainConfig, Trainer};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    pub model: ModelConfig,
    pub params: HeadParams<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<AdamState<f32>>,
    pub epochs_completed: usize,
}

/// Human-readable overview of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointSummary {
    pub format_version: u32,
    pub dim: usize,
    pub epochs_completed: usize,
    pub parameter_count: usize,
    pub has_optimizer: bool,
    pub optimizer_steps: Option<u64>,
    pub tensors: Vec<TensorSummary>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorSummary {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub l2_norm: f64,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer, with_optimizer: bool) -> Self {
        Self {
            format_version: CHECKPOINT_VERSION,
            config: t.config.clone(),
            model: t.model,
            params: t.params.clone(),
            optimizer: with_optimizer.then(|| t.optimizer.clone()),
            epochs_completed: t.epochs_done,
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::resume(self.config, self.params, self.optimizer, self.epochs_completed)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::json("<checkpoint>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::json("<checkpoint>", e))?;
        ck.check()?;
        Ok(ck)
    }

    fn check(&self) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        if self.params.dim() != self.model.dim {
            return Err(Error::DimMismatch {
                left: self.params.dim(),
                right: self.model.dim,
                context: "checkpoint parameters vs model width".into(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let body = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        ck.check()?;
        Ok(ck)
    }

    pub fn summary(&self) -> CheckpointSummary {
        let tensors: Vec<TensorSummary> = self
            .params
            .tensors()
            .into_iter()
            .map(|(name, m)| TensorSummary {
                name,
                rows: m.rows(),
                cols: m.cols(),
                l2_norm: m.frobenius_norm().into(),
            })
            .collect();
        CheckpointSummary {
            format_version: self.format_version,
            dim: self.model.dim,
            epochs_completed: self.epochs_completed,
            parameter_count: self.params.parameter_count(),
            has_optimizer: self.optimizer.is_some(),
            optimizer_steps: self.optimizer.as_ref().map(|o| o.step),
            tensors,
            config: self.config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TrainConfig;

    fn trainer() -> Trainer {
        let cfg = TrainConfig {
            heads: 2,
            ..TrainConfig::desk()
        };
        Trainer::new(cfg, 8).unwrap()
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut t = trainer();
        t.params.item_wti.text_bias.as_mut_slice()[0] = 1.0e-38;
        t.params.outfit_adapter.weight.as_mut_slice()[1] = -0.1;
        let ck = Checkpoint::from_trainer(&t, true);
        let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &Checkpoint| -> Vec<u32> {
            c.params
                .tensors()
                .iter()
                .flat_map(|(_, m)| m.as_slice().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(bits(&back), bits(&ck));
    }

    #[test]
    fn version_is_checked() {
        let mut ck = Checkpoint::from_trainer(&trainer(), false);
        ck.format_version = 7;
        let text = serde_json::to_string(&ck).unwrap();
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Config(_))));
    }

    #[test]
    fn file_round_trip_and_summary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run/ck.json");
        let ck = Checkpoint::from_trainer(&trainer(), false);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let s = back.summary();
        assert_eq!(s.dim, 8);
        assert!(!s.has_optimizer);
        assert_eq!(s.parameter_count, ck.params.parameter_count());
        assert!(s.tensors.iter().any(|t| t.name == "item_wti.outfit_weight"));
        assert!(matches!(
            Checkpoint::load(dir.path().join("missing.json")),
            Err(Error::Io { .. })
        ));
    }
}
