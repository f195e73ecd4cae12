//! The full three-level head: adapters, item-level WTI, style extraction
//! with style-level WTI, and outfit-level global vectors.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{AdapterParams, BoundAdapter, BoundEncoder, TransformerConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::interaction::{info_nce_on_tape, BoundWti, LossWeights, Side, StackedTokens, TokenSet, WtiParams};
use crate::numgraph::{Groups, Mask, Matrix, Real, Tape, Var};
use crate::params::{prefixed, ParamIds, ParamSet};
use crate::style::{cluster_tokens, CentroidInit, KMeansConfig, StyleTokens};

/// Architecture and style-extraction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub transformer: TransformerConfig,
    /// Cluster ratio for outfit items.
    pub k_outfit: f64,
    /// Cluster ratio for description tokens.
    pub k_text: f64,
    /// Reuse the item-level token-weighting heads at the style level.
    pub share_style_heads: bool,
    /// Greedy farthest-point seeding; otherwise seeded random seeding.
    pub greedy_init: bool,
    pub init_seed: u64,
    pub kmeans: KMeansConfig,
    /// Zero-norm vectors are errors instead of being floored.
    pub strict: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            transformer: TransformerConfig::default(),
            k_outfit: 1.0 / 3.0,
            k_text: 1.0 / 6.0,
            share_style_heads: false,
            greedy_init: true,
            init_seed: 0,
            kmeans: KMeansConfig::default(),
            strict: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("embedding width must be positive".into()));
        }
        self.transformer.validate(self.dim)?;
        for (name, k) in [("k_outfit", self.k_outfit), ("k_text", self.k_text)] {
            if !(k > 0.0 && k <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {k}")));
            }
        }
        Ok(())
    }

    fn ratio(&self, side: Side) -> f64 {
        match side {
            Side::Outfit => self.k_outfit,
            Side::Text => self.k_text,
        }
    }

    /// Seeding strategy for one sample; random seeding derives a distinct
    /// stream per sample key and side.
    pub fn centroid_init(&self, key: u64, side: Side) -> CentroidInit {
        if self.greedy_init {
            CentroidInit::Greedy
        } else {
            let salt = match side {
                Side::Outfit => 0x9e37_79b9_7f4a_7c15,
                Side::Text => 0xc2b2_ae3d_27d4_eb4f,
            };
            CentroidInit::Random {
                seed: splitmix(self.init_seed ^ splitmix(key ^ salt)),
            }
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit key for a sample identifier (FNV-1a).
pub fn sample_key(id: &str) -> u64 {
    id.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Which level losses take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelToggles {
    pub item: bool,
    pub style: bool,
    pub outfit: bool,
}

impl Default for LevelToggles {
    fn default() -> Self {
        Self {
            item: true,
            style: true,
            outfit: true,
        }
    }
}

impl LevelToggles {
    pub fn any(&self) -> bool {
        self.item || self.style || self.outfit
    }
}

/// Every trainable matrix of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub outfit_adapter: AdapterParams<T>,
    pub text_adapter: AdapterParams<T>,
    pub item_wti: WtiParams<T>,
    /// `None` when the style level shares the item-level heads.
    pub style_wti: Option<WtiParams<T>>,
    /// E^o: encodes items before clustering.
    pub outfit_style_encoder: TransformerEncoder<T>,
    /// E^t: encodes description tokens before clustering.
    pub text_style_encoder: TransformerEncoder<T>,
    /// F^o: aggregates outfit style tokens.
    pub outfit_global_encoder: TransformerEncoder<T>,
    /// F^t: aggregates text style tokens.
    pub text_global_encoder: TransformerEncoder<T>,
}

impl<T: Real> HeadParams<T> {
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let t = &cfg.transformer;
        Ok(Self {
            outfit_adapter: AdapterParams::identity(d),
            text_adapter: AdapterParams::identity(d),
            item_wti: WtiParams::zeros(d),
            style_wti: (!cfg.share_style_heads).then(|| WtiParams::zeros(d)),
            outfit_style_encoder: TransformerEncoder::init(d, t, rng),
            text_style_encoder: TransformerEncoder::init(d, t, rng),
            outfit_global_encoder: TransformerEncoder::init(d, t, rng),
            text_global_encoder: TransformerEncoder::init(d, t, rng),
        })
    }

    pub fn dim(&self) -> usize {
        self.outfit_adapter.weight.rows()
    }

    pub fn style_wti(&self) -> &WtiParams<T> {
        self.style_wti.as_ref().unwrap_or(&self.item_wti)
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            outfit_adapter: self.outfit_adapter.cast(),
            text_adapter: self.text_adapter.cast(),
            item_wti: self.item_wti.cast(),
            style_wti: self.style_wti.as_ref().map(|w| w.cast()),
            outfit_style_encoder: self.outfit_style_encoder.cast(),
            text_style_encoder: self.text_style_encoder.cast(),
            outfit_global_encoder: self.outfit_global_encoder.cast(),
            text_global_encoder: self.text_global_encoder.cast(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.as_slice().len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> BoundHead {
        let mut ids = ParamIds::new();
        let outfit_adapter = self.outfit_adapter.bind(tape, &mut ids);
        let text_adapter = self.text_adapter.bind(tape, &mut ids);
        let item_wti = self.item_wti.bind(tape, &mut ids);
        let style_wti = match &self.style_wti {
            Some(w) => w.bind(tape, &mut ids),
            None => item_wti,
        };
        BoundHead {
            outfit_adapter,
            text_adapter,
            item_wti,
            style_wti,
            outfit_style_encoder: self.outfit_style_encoder.bind(tape, &mut ids),
            text_style_encoder: self.text_style_encoder.bind(tape, &mut ids),
            outfit_global_encoder: self.outfit_global_encoder.bind(tape, &mut ids),
            text_global_encoder: self.text_global_encoder.bind(tape, &mut ids),
        }
    }

    fn check_input(&self, side: Side, e: &Matrix<T>) -> Result<()> {
        if e.rows() == 0 {
            return Err(Error::EmptyMask { op: "model-input" });
        }
        if e.cols() != self.dim() {
            return Err(Error::DimMismatch {
                left: e.cols(),
                right: self.dim(),
                context: format!("{side:?} tokens vs model width"),
            });
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for HeadParams<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = prefixed("outfit_adapter", self.outfit_adapter.tensors());
        out.extend(prefixed("text_adapter", self.text_adapter.tensors()));
        out.extend(prefixed("item_wti", self.item_wti.tensors()));
        if let Some(w) = &self.style_wti {
            out.extend(prefixed("style_wti", w.tensors()));
        }
        out.extend(prefixed("outfit_style_encoder", self.outfit_style_encoder.tensors()));
        out.extend(prefixed("text_style_encoder", self.text_style_encoder.tensors()));
        out.extend(prefixed("outfit_global_encoder", self.outfit_global_encoder.tensors()));
        out.extend(prefixed("text_global_encoder", self.text_global_encoder.tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = self.outfit_adapter.tensors_mut();
        out.extend(self.text_adapter.tensors_mut());
        out.extend(self.item_wti.tensors_mut());
        if let Some(w) = &mut self.style_wti {
            out.extend(w.tensors_mut());
        }
        out.extend(self.outfit_style_encoder.tensors_mut());
        out.extend(self.text_style_encoder.tensors_mut());
        out.extend(self.outfit_global_encoder.tensors_mut());
        out.extend(self.text_global_encoder.tensors_mut());
        out
    }
}

/// Tape handles for a bound [`HeadParams`]. Parameter ids follow the
/// enumeration order of [`ParamSet::tensors`].
#[derive(Debug, Clone)]
pub struct BoundHead {
    outfit_adapter: BoundAdapter,
    text_adapter: BoundAdapter,
    item_wti: BoundWti,
    style_wti: BoundWti,
    outfit_style_encoder: BoundEncoder,
    text_style_encoder: BoundEncoder,
    outfit_global_encoder: BoundEncoder,
    text_global_encoder: BoundEncoder,
}

/// One matched outfit/description pair. `key` identifies the sample for
/// seeded random centroid seeding.
#[derive(Debug, Clone, Copy)]
pub struct Pair<'a, T> {
    pub outfit: &'a Matrix<T>,
    pub text: &'a Matrix<T>,
    pub key: u64,
}

/// Per-sample clustering of one side within a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub assignments: Vec<usize>,
    pub seeds: Vec<usize>,
}

/// Tape nodes produced by one batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchOutputs {
    pub item_similarity: Option<Var>,
    pub style_similarity: Option<Var>,
    pub outfit_similarity: Option<Var>,
    pub item_loss: Option<Var>,
    pub style_loss: Option<Var>,
    pub outfit_loss: Option<Var>,
    /// Scalar `w_item L_item + alpha L_style + beta L_outfit` over the
    /// enabled levels.
    pub total: Var,
    pub outfit_clusters: Vec<Clustering>,
    pub text_clusters: Vec<Clustering>,
}

fn stack<T: Real>(tape: &mut Tape<T>, parts: &[&Matrix<T>]) -> Result<StackedTokens> {
    let lens: Vec<usize> = parts.iter().map(|m| m.rows()).collect();
    let rows = tape.constant(Matrix::vstack(parts.iter().copied())?);
    Ok(StackedTokens {
        rows,
        groups: Rc::new(Groups::segments(&lens)),
    })
}

impl BoundHead {
    /// Encodes, normalizes and clusters each sample's tokens, returning the
    /// stacked centroids (differentiable group means under the fixed
    /// assignments).
    fn style_tokens<T: Real>(
        &self,
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        side: Side,
        x: &StackedTokens,
        keys: &[u64],
    ) -> Result<(StackedTokens, Vec<Clustering>)> {
        let encoder = match side {
            Side::Outfit => &self.outfit_style_encoder,
            Side::Text => &self.text_style_encoder,
        };
        let encoded = encoder.forward(tape, x.rows, &x.groups)?;
        let unit = tape.row_l2_normalize(encoded);
        let values = tape.value(unit).clone();
        let mut global = vec![0usize; values.rows()];
        let mut counts = Vec::with_capacity(keys.len());
        let mut clusters = Vec::with_capacity(keys.len());
        let mut offset = 0;
        for (members, &key) in x.groups.members().iter().zip(keys) {
            let local = values.select_rows(members);
            let (seeds, km) = cluster_tokens(
                &local,
                cfg.ratio(side),
                cfg.centroid_init(key, side),
                &cfg.kmeans,
            )?;
            for (&r, &a) in members.iter().zip(&km.assignments) {
                global[r] = offset + a;
            }
            let c = km.centroids.rows();
            counts.push(c);
            offset += c;
            clusters.push(Clustering {
                assignments: km.assignments,
                seeds,
            });
        }
        let groups = Groups::from_assignments(&global, offset)?;
        let centroids = tape.group_mean(unit, Rc::new(groups))?;
        Ok((
            StackedTokens {
                rows: centroids,
                groups: Rc::new(Groups::segments(&counts)),
            },
            clusters,
        ))
    }

    fn global_vectors<T: Real>(
        &self,
        tape: &mut Tape<T>,
        side: Side,
        styles: &StackedTokens,
    ) -> Result<Var> {
        let encoder = match side {
            Side::Outfit => &self.outfit_global_encoder,
            Side::Text => &self.text_global_encoder,
        };
        let f = encoder.forward(tape, styles.rows, &styles.groups)?;
        tape.group_mean(f, styles.groups.clone())
    }

    /// Records the batched forward pass and the weighted InfoNCE losses of
    /// the enabled levels. Row `n` / column `n` of every similarity matrix
    /// is pair `n`. Levels with zero weight are computed but left out of the
    /// total.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        cfg: &ModelConfig,
        weights: &LossWeights,
        toggles: &LevelToggles,
        batch: &[Pair<'_, T>],
    ) -> Result<BatchOutputs> {
        if batch.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let outfits: Vec<&Matrix<T>> = batch.iter().map(|p| p.outfit).collect();
        let texts: Vec<&Matrix<T>> = batch.iter().map(|p| p.text).collect();
        let keys: Vec<u64> = batch.iter().map(|p| p.key).collect();
        let raw_o = stack(tape, &outfits)?;
        let raw_t = stack(tape, &texts)?;
        let o = StackedTokens {
            rows: self.outfit_adapter.forward(tape, raw_o.rows)?,
            groups: raw_o.groups,
        };
        let t = StackedTokens {
            rows: self.text_adapter.forward(tape, raw_t.rows)?,
            groups: raw_t.groups,
        };
        let p = T::lit(weights.p);
        let factor = T::lit(weights.logit_factor());
        let mut out = BatchOutputs {
            item_similarity: None,
            style_similarity: None,
            outfit_similarity: None,
            item_loss: None,
            style_loss: None,
            outfit_loss: None,
            total: tape.constant(Matrix::scalar(T::zero())),
            outfit_clusters: Vec::new(),
            text_clusters: Vec::new(),
        };
        let mut terms: Vec<Var> = Vec::new();
        if toggles.item {
            let s = self.item_wti.batch_similarity(tape, &o, &t, p)?;
            let l = info_nce_on_tape(tape, s, factor)?;
            out.item_similarity = Some(s);
            out.item_loss = Some(l);
            terms.push(l);
        }
        if toggles.style || toggles.outfit {
            let (so, co) = self.style_tokens(tape, cfg, Side::Outfit, &o, &keys)?;
            let (st, ct) = self.style_tokens(tape, cfg, Side::Text, &t, &keys)?;
            out.outfit_clusters = co;
            out.text_clusters = ct;
            if toggles.style {
                let s = self.style_wti.batch_similarity(tape, &so, &st, p)?;
                let l = info_nce_on_tape(tape, s, factor)?;
                out.style_similarity = Some(s);
                out.style_loss = Some(l);
                if weights.alpha != 0.0 {
                    terms.push(tape.scale(l, T::lit(weights.alpha)));
                }
            }
            if toggles.outfit {
                let go = self.global_vectors(tape, Side::Outfit, &so)?;
                let gt = self.global_vectors(tape, Side::Text, &st)?;
                let s = tape.cosine_matrix(go, gt)?;
                let l = info_nce_on_tape(tape, s, factor)?;
                out.outfit_similarity = Some(s);
                out.outfit_loss = Some(l);
                if weights.beta != 0.0 {
                    terms.push(tape.scale(l, T::lit(weights.beta)));
                }
            }
        }
        if let Some((&first, rest)) = terms.split_first() {
            out.total = rest.iter().try_fold(first, |acc, &v| tape.add(acc, v))?;
        }
        Ok(out)
    }
}

/// Everything the scorer needs from one side of a pair, computed once per
/// sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SideEncoding<T> {
    pub side: Side,
    /// Adapted tokens with item-level weights.
    pub items: TokenSet<T>,
    pub styles: StyleTokens<T>,
    /// Centroids with style-level weights.
    pub style_set: TokenSet<T>,
    /// Mean-pooled aggregated style tokens.
    pub global: Vec<T>,
}

impl<T: Real> HeadParams<T> {
    /// Runs one side of a sample through the head.
    pub fn encode(
        &self,
        cfg: &ModelConfig,
        side: Side,
        e: &Matrix<T>,
        key: u64,
    ) -> Result<SideEncoding<T>> {
        self.check_input(side, e)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let raw = stack(&mut tape, &[e])?;
        let adapter = match side {
            Side::Outfit => &bound.outfit_adapter,
            Side::Text => &bound.text_adapter,
        };
        let x = StackedTokens {
            rows: adapter.forward(&mut tape, raw.rows)?,
            groups: raw.groups,
        };
        let (styles, mut clusters) = bound.style_tokens(&mut tape, cfg, side, &x, &[key])?;
        let global = bound.global_vectors(&mut tape, side, &styles)?;
        let adapted = tape.value(x.rows).clone();
        let centroids = tape.value(styles.rows).clone();
        let items = TokenSet::prepare(
            &adapted,
            &self.item_wti,
            side,
            &Mask::all(adapted.rows()),
            cfg.strict,
        )?;
        let style_set = TokenSet::prepare(
            &centroids,
            self.style_wti(),
            side,
            &Mask::all(centroids.rows()),
            cfg.strict,
        )?;
        let c = clusters.pop().expect("one sample");
        Ok(SideEncoding {
            side,
            items,
            styles: StyleTokens {
                centroids,
                assignments: c.assignments,
                seeds: c.seeds,
                source: side,
            },
            style_set,
            global: tape.value(global).row(0).to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::interaction::{info_nce, wti_terms, Level, SimilarityMatrix};

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            dim: 8,
            transformer: TransformerConfig {
                heads: 2,
                ..TransformerConfig::default()
            },
            ..ModelConfig::default()
        }
    }

    #[test]
    fn bind_order_matches_tensor_names() {
        let cfg = small_cfg();
        let params = HeadParams::<f64>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let _ = params.bind(&mut tape);
        assert_eq!(tape.len(), params.tensors().len());
        for (i, (_, m)) in params.tensors().iter().enumerate() {
            assert_eq!(tape.value(Var::from_index(i)), *m);
        }
        let shared = HeadParams::<f64>::init(
            &ModelConfig {
                share_style_heads: true,
                ..cfg
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert_eq!(shared.tensors().len() + 4, params.tensors().len());
    }

    /// The batched tape forward agrees with independent per-pair scoring of
    /// the value-level encodings.
    #[test]
    fn batched_matrices_match_per_pair_encodings() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = HeadParams::<f64>::init(&cfg, &mut rng).unwrap();
        for m in params.tensors_mut() {
            for v in m.as_mut_slice() {
                *v += 0.05 * rng.random_range(-1.0..1.0);
            }
        }
        let data: Vec<(Matrix<f64>, Matrix<f64>)> = [(3, 5), (5, 2), (1, 7)]
            .iter()
            .map(|&(no, nt)| (random(no, 8, &mut rng), random(nt, 8, &mut rng)))
            .collect();
        let batch: Vec<Pair<f64>> = data
            .iter()
            .enumerate()
            .map(|(i, (o, t))| Pair {
                outfit: o,
                text: t,
                key: i as u64,
            })
            .collect();
        let weights = LossWeights::default();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let out = bound
            .forward(&mut tape, &cfg, &weights, &LevelToggles::default(), &batch)
            .unwrap();
        let enc_o: Vec<_> = batch
            .iter()
            .map(|p| params.encode(&cfg, Side::Outfit, p.outfit, p.key).unwrap())
            .collect();
        let enc_t: Vec<_> = batch
            .iter()
            .map(|p| params.encode(&cfg, Side::Text, p.text, p.key).unwrap())
            .collect();
        let item = tape.value(out.item_similarity.unwrap());
        let style = tape.value(out.style_similarity.unwrap());
        let outfit = tape.value(out.outfit_similarity.unwrap());
        for n in 0..3 {
            for m in 0..3 {
                let it = wti_terms(&enc_o[n].items, &enc_t[m].items).combine(0.2);
                assert!((item[(n, m)] - it).abs() < 1e-12);
                let st = wti_terms(&enc_o[n].style_set, &enc_t[m].style_set).combine(0.2);
                assert!((style[(n, m)] - st).abs() < 1e-12);
                let (a, b) = (&enc_o[n].global, &enc_t[m].global);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((outfit[(n, m)] - dot / (na * nb)).abs() < 1e-12);
            }
        }
        let li = info_nce(
            &SimilarityMatrix {
                values: item.clone(),
                level: Level::Item,
            },
            100.0,
        )
        .unwrap();
        let ls = info_nce(
            &SimilarityMatrix {
                values: style.clone(),
                level: Level::Style,
            },
            100.0,
        )
        .unwrap();
        let lo = info_nce(
            &SimilarityMatrix {
                values: outfit.clone(),
                level: Level::Outfit,
            },
            100.0,
        )
        .unwrap();
        let total = tape.value(out.total).item();
        assert!((total - (li + 0.3 * ls + 0.3 * lo)).abs() < 1e-9);
        for (c, e) in out.outfit_clusters.iter().zip(&enc_o) {
            assert_eq!(c.assignments, e.styles.assignments);
        }
    }

    #[test]
    fn no_levels_means_zero_loss_and_no_gradient() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = HeadParams::<f64>::init(&cfg, &mut rng).unwrap();
        let (o, t) = (random(3, 8, &mut rng), random(2, 8, &mut rng));
        let batch = [
            Pair { outfit: &o, text: &t, key: 0 },
            Pair { outfit: &t, text: &o, key: 1 },
        ];
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let off = LevelToggles {
            item: false,
            style: false,
            outfit: false,
        };
        let out = bound
            .forward(&mut tape, &cfg, &LossWeights::default(), &off, &batch)
            .unwrap();
        assert_eq!(tape.value(out.total).item(), 0.0);
        let g = tape.gradients(out.total).unwrap();
        for id in 0..params.tensors().len() {
            assert_eq!(g.param(id).unwrap().frobenius_norm(), 0.0);
        }
    }

    #[test]
    fn random_seeding_is_keyed() {
        let cfg = ModelConfig {
            greedy_init: false,
            init_seed: 9,
            ..small_cfg()
        };
        assert_eq!(cfg.centroid_init(4, Side::Text), cfg.centroid_init(4, Side::Text));
        assert_ne!(cfg.centroid_init(4, Side::Text), cfg.centroid_init(4, Side::Outfit));
        assert_ne!(cfg.centroid_init(4, Side::Text), cfg.centroid_init(5, Side::Text));
        assert_eq!(small_cfg().centroid_init(4, Side::Text), CentroidInit::Greedy);
        assert_eq!(sample_key("a"), sample_key("a"));
        assert_ne!(sample_key("a"), sample_key("b"));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            k_text: 0.0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            dim: 12,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    /// Central differences over every parameter entry of the composite
    /// loss.
    #[test]
    fn full_loss_gradients_match_finite_differences() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = HeadParams::<f64>::init(&cfg, &mut rng).unwrap();
        for m in params.tensors_mut() {
            for v in m.as_mut_slice() {
                *v += 0.1 * rng.random_range(-1.0..1.0);
            }
        }
        let data: Vec<(Matrix<f64>, Matrix<f64>)> = [(3, 5), (1, 2), (4, 7), (2, 1)]
            .iter()
            .map(|&(no, nt)| (random(no, 8, &mut rng), random(nt, 8, &mut rng)))
            .collect();
        let batch: Vec<Pair<f64>> = data
            .iter()
            .enumerate()
            .map(|(i, (o, t))| Pair { outfit: o, text: t, key: i as u64 })
            .collect();
        let weights = LossWeights::default();
        let loss = |p: &HeadParams<f64>| -> f64 {
            let mut tape = Tape::new();
            let b = p.bind(&mut tape);
            let out = b.forward(&mut tape, &cfg, &weights, &LevelToggles::default(), &batch).unwrap();
            tape.value(out.total).item()
        };
        let mut tape = Tape::new();
        let b = params.bind(&mut tape);
        let out = b.forward(&mut tape, &cfg, &weights, &LevelToggles::default(), &batch).unwrap();
        let g = tape.gradients(out.total).unwrap();
        let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (id, name) in names.iter().enumerate() {
            let analytic = g.param(id).unwrap();
            let mut numeric = analytic.clone();
            for k in 0..analytic.as_slice().len() {
                let mut plus = params.clone();
                plus.tensors_mut()[id].as_mut_slice()[k] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[id].as_mut_slice()[k] -= h;
                numeric.as_mut_slice()[k] = (loss(&plus) - loss(&minus)) / (2.0 * h);
            }
            let mut diff = analytic.clone();
            diff.add_assign(&numeric.scaled(-1.0));
            let rel = diff.frobenius_norm()
                / analytic.frobenius_norm().max(numeric.frobenius_norm()).max(1e-8);
            eprintln!("{name}: {rel:.2e} |g|={:.2e}", analytic.frobenius_norm());
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
