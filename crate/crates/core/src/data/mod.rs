//! Samples, datasets and their on-disk sources.

pub mod bundle;
pub mod polyvore;
pub mod synth;

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{sample_key, Pair};
use crate::numgraph::Matrix;

pub use bundle::{read_bundle, write_bundle, BundleRecord, EmbeddingBundle};
pub use polyvore::{load_polyvore, DataFormat, JoinStats, Manifest};
pub use synth::{synth_generate, Planting, SynthConfig, TokenSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "val" | "validation" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One outfit with its description.
#[derive(Debug, Clone, PartialEq)]
pub struct OutfitSample {
    pub outfit_id: String,
    pub item_ids: Vec<String>,
    /// One row per item.
    pub e_o: Matrix<f32>,
    pub token_strings: Vec<String>,
    /// One row per description token.
    pub e_t: Matrix<f32>,
    pub split: Split,
}

impl OutfitSample {
    pub fn key(&self) -> u64 {
        sample_key(&self.outfit_id)
    }

    pub fn pair(&self) -> Pair<'_, f32> {
        Pair {
            outfit: &self.e_o,
            text: &self.e_t,
            key: self.key(),
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.e_o.rows() == 0 || self.e_t.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "outfit `{}` needs at least one item and one description token",
                self.outfit_id
            )));
        }
        for (what, m) in [("items", &self.e_o), ("description", &self.e_t)] {
            if m.cols() != dim {
                return Err(Error::DimMismatch {
                    left: m.cols(),
                    right: dim,
                    context: format!("{what} of outfit `{}`", self.outfit_id),
                });
            }
            if !m.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "outfit `{}` has non-finite {what} embeddings",
                    self.outfit_id
                )));
            }
        }
        if self.item_ids.len() != self.e_o.rows() || self.token_strings.len() != self.e_t.rows() {
            return Err(Error::InvalidArgument(format!(
                "outfit `{}`: label count does not match embedding rows",
                self.outfit_id
            )));
        }
        Ok(())
    }
}

/// Samples sharing one embedding width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub samples: Vec<OutfitSample>,
}

impl Dataset {
    /// Checks widths, non-empty token sets and unique ids per split.
    pub fn new(dim: usize, samples: Vec<OutfitSample>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &samples {
            s.validate(dim)?;
            if !seen.insert((s.split, s.outfit_id.as_str())) {
                return Err(Error::DuplicateId(s.outfit_id.clone()));
            }
        }
        Ok(Self { dim, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            dim: self.dim,
            samples: self
                .samples
                .iter()
                .filter(|s| s.split == split)
                .cloned()
                .collect(),
        }
    }

    pub fn get(&self, outfit_id: &str) -> Option<&OutfitSample> {
        self.samples.iter().find(|s| s.outfit_id == outfit_id)
    }
}
