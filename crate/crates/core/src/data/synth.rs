//! Synthetic outfits with planted styles.
//!
//! Unit-norm archetype vectors play the role of styles. Every outfit draws
//! a few archetypes, each item is a noisy normalized copy of one of them,
//! and the description consists of noisy copies of some of the outfit's
//! items plus distractor tokens from archetypes the outfit does not use.

use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::bundle::{write_bundle, EmbeddingBundle};
use super::polyvore::{BundlePaths, DataFormat, Manifest, MANIFEST_FILE};
use super::{Dataset, OutfitSample, Split};
use crate::error::{Error, Result};
use crate::numgraph::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub outfits: usize,
    pub archetypes: usize,
    pub styles_min: usize,
    pub styles_max: usize,
    pub items_min: usize,
    pub items_max: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub sigma: f64,
    /// Probability that a description token is a distractor.
    pub distractor_rate: f64,
    pub dim: usize,
    pub seed: u64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            outfits: 500,
            archetypes: 64,
            styles_min: 1,
            styles_max: 3,
            items_min: 4,
            items_max: 19,
            tokens_min: 8,
            tokens_max: 16,
            sigma: 0.1,
            distractor_rate: 0.1,
            dim: 32,
            seed: 7,
            valid_fraction: 0.1,
            test_fraction: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.archetypes < 1 {
            return bad("at least one style archetype is required".into());
        }
        if self.outfits == 0 || self.dim == 0 {
            return bad("outfit count and embedding width must be positive".into());
        }
        for (name, lo, hi) in [
            ("styles", self.styles_min, self.styles_max),
            ("items", self.items_min, self.items_max),
            ("tokens", self.tokens_min, self.tokens_max),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range {lo}..={hi} is empty"));
            }
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return bad("distractor rate must lie in [0, 1]".into());
        }
        let f = self.valid_fraction + self.test_fraction;
        if !(self.valid_fraction >= 0.0 && self.test_fraction >= 0.0 && f < 1.0) {
            return bad("split fractions must be non-negative and sum below 1".into());
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        let n = self.outfits as f64;
        let train = (n * (1.0 - self.valid_fraction - self.test_fraction)).round() as usize;
        let valid = (n * self.valid_fraction).round() as usize;
        if index < train {
            Split::Train
        } else if index < train + valid {
            Split::Valid
        } else {
            Split::Test
        }
    }
}

/// Where a description token came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenSource {
    Item { item: usize, archetype: usize },
    Distractor { archetype: usize },
}

impl TokenSource {
    pub fn archetype(&self) -> usize {
        match *self {
            TokenSource::Item { archetype, .. } | TokenSource::Distractor { archetype } => archetype,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutfitPlanting {
    pub outfit_id: String,
    pub archetypes: Vec<usize>,
    pub item_archetypes: Vec<usize>,
    pub tokens: Vec<TokenSource>,
}

/// Generating archetype of every item and description token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Planting {
    pub config: SynthConfig,
    pub archetype_vectors: Vec<Vec<f32>>,
    pub outfits: Vec<OutfitPlanting>,
}

fn gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(base: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let g = gaussian(base.len(), rng);
    if sigma == 0.0 {
        return base.to_vec();
    }
    normalized(base.iter().zip(g).map(|(b, z)| b + sigma * z).collect())
}

fn to_f32(rows: &[Vec<f64>]) -> Matrix<f32> {
    let rows: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&v| v as f32).collect())
        .collect();
    Matrix::from_rows(&rows)
}

/// Draws the dataset and its planting record from `config.seed`.
pub fn synth_generate(config: &SynthConfig) -> Result<(Dataset, Planting)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.dim;
    let archetypes: Vec<Vec<f64>> = (0..config.archetypes)
        .map(|_| normalized(gaussian(d, &mut rng)))
        .collect();
    let all: Vec<usize> = (0..config.archetypes).collect();
    let mut samples = Vec::with_capacity(config.outfits);
    let mut plantings = Vec::with_capacity(config.outfits);
    for o in 0..config.outfits {
        let outfit_id = format!("syn{o:05}");
        let n_styles = rng
            .random_range(config.styles_min..=config.styles_max)
            .min(config.archetypes);
        let styles: Vec<usize> = all
            .choose_multiple(&mut rng, n_styles)
            .copied()
            .collect();
        let others: Vec<usize> = all.iter().copied().filter(|a| !styles.contains(a)).collect();
        let n_items = rng.random_range(config.items_min..=config.items_max);
        let mut item_arch = Vec::with_capacity(n_items);
        let mut items = Vec::with_capacity(n_items);
        for _ in 0..n_items {
            let a = *styles.choose(&mut rng).expect("at least one style");
            item_arch.push(a);
            items.push(noisy(&archetypes[a], config.sigma, &mut rng));
        }
        let n_tokens = rng.random_range(config.tokens_min..=config.tokens_max);
        let mut copy_order: Vec<usize> = (0..n_items).collect();
        copy_order.shuffle(&mut rng);
        let mut copied = 0;
        let mut tokens = Vec::with_capacity(n_tokens);
        let mut sources = Vec::with_capacity(n_tokens);
        for j in 0..n_tokens {
            let distract = rng.random_bool(config.distractor_rate) && j > 0;
            let next = (!distract).then(|| {
                copied += 1;
                copy_order[(copied - 1) % n_items]
            });
            match next {
                Some(i) => {
                    tokens.push(noisy(&items[i], config.sigma, &mut rng));
                    sources.push(TokenSource::Item {
                        item: i,
                        archetype: item_arch[i],
                    });
                }
                None => {
                    let pool = if others.is_empty() { &all } else { &others };
                    let a = *pool.choose(&mut rng).expect("nonempty pool");
                    tokens.push(noisy(&archetypes[a], config.sigma, &mut rng));
                    sources.push(TokenSource::Distractor { archetype: a });
                }
            }
        }
        let token_strings = sources
            .iter()
            .map(|s| match *s {
                TokenSource::Item { item, archetype } => format!("s{archetype}:item{item}"),
                TokenSource::Distractor { archetype } => format!("s{archetype}:noise"),
            })
            .collect();
        samples.push(OutfitSample {
            item_ids: (0..n_items).map(|i| format!("{outfit_id}_{i}")).collect(),
            outfit_id: outfit_id.clone(),
            e_o: to_f32(&items),
            token_strings,
            e_t: to_f32(&tokens),
            split: config.split_of(o),
        });
        plantings.push(OutfitPlanting {
            outfit_id,
            archetypes: styles,
            item_archetypes: item_arch,
            tokens: sources,
        });
    }
    let planting = Planting {
        config: config.clone(),
        archetype_vectors: archetypes
            .iter()
            .map(|a| a.iter().map(|&v| v as f32).collect())
            .collect(),
        outfits: plantings,
    };
    Ok((Dataset::new(d, samples)?, planting))
}

#[derive(Serialize)]
struct OutItem<'a> {
    item_id: &'a str,
    index: usize,
}

#[derive(Serialize)]
struct OutOutfit<'a> {
    set_id: &'a str,
    items: Vec<OutItem<'a>>,
    desc_tokens: &'a [String],
}

/// Writes bundles, per-split metadata, the planting record and a
/// manifest into `dir`.
pub fn write_synthetic(dir: impl AsRef<Path>, data: &Dataset, planting: &Planting) -> Result<Manifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = EmbeddingBundle::new(data.dim);
    let mut items = EmbeddingBundle::new(data.dim);
    for s in &data.samples {
        text.push(s.outfit_id.clone(), s.e_t.clone())?;
        for (i, id) in s.item_ids.iter().enumerate() {
            items.push(id.clone(), s.e_o.select_rows(&[i]))?;
        }
    }
    write_bundle(&text, dir.join("outfit_text.otfe"))?;
    write_bundle(&items, dir.join("item_image.otfe"))?;
    let mut splits = std::collections::BTreeMap::new();
    for split in Split::ALL {
        let records: Vec<OutOutfit> = data
            .samples
            .iter()
            .filter(|s| s.split == split)
            .map(|s| OutOutfit {
                set_id: &s.outfit_id,
                items: s
                    .item_ids
                    .iter()
                    .enumerate()
                    .map(|(i, id)| OutItem {
                        item_id: id,
                        index: i + 1,
                    })
                    .collect(),
                desc_tokens: &s.token_strings,
            })
            .collect();
        let name = format!("{split}.json");
        let path = dir.join(&name);
        let body = serde_json::to_string(&records).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        splits.insert(split, name.into());
    }
    let path = dir.join("planting.json");
    let body = serde_json::to_string(planting).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    let manifest = Manifest {
        format: DataFormat::Synthetic,
        splits,
        bundles: BundlePaths {
            outfit_text: "outfit_text.otfe".into(),
            item_image: "item_image.otfe".into(),
        },
        root: dir.to_path_buf(),
    };
    manifest.save(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
