//! Outfit-level global vectors and the composite training objective.

use serde::{Deserialize, Serialize};

use crate::encoders::{transformer_layer_forward, TransformerLayerParams};
use crate::error::{Error, Result};
use crate::interaction::{cosine_from_parts, dot, LossWeights, Side};
use crate::model::{HeadParams, LevelToggles, ModelConfig, Pair};
use crate::numgraph::{Mask, Real, Tape};
use crate::style::StyleTokens;

/// Mean-pooled aggregate of a sample's style tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalVector<T> {
    pub values: Vec<T>,
    pub side: Side,
}

/// Aggregates the centroids with `params` and averages the result.
pub fn outfit_vector<T: Real>(
    styles: &StyleTokens<T>,
    params: &TransformerLayerParams<T>,
) -> Result<GlobalVector<T>> {
    let c = styles.centroids.rows();
    if c == 0 {
        return Err(Error::EmptyMask { op: "outfit-vector" });
    }
    let f = transformer_layer_forward(&styles.centroids, params, &Mask::all(c))?;
    let inv = T::one() / T::lit(c as f64);
    let values = (0..f.cols())
        .map(|j| (0..c).map(|i| f[(i, j)]).sum::<T>() * inv)
        .collect();
    Ok(GlobalVector {
        values,
        side: styles.source,
    })
}

/// Cosine between two global vectors. A zero vector is an error when
/// `strict`, otherwise its norm is floored and the result is 0.
pub fn outfit_similarity<T: Real>(o: &[T], t: &[T], strict: bool) -> Result<T> {
    if o.len() != t.len() {
        return Err(Error::DimMismatch {
            left: o.len(),
            right: t.len(),
            context: "outfit vs text global vector".into(),
        });
    }
    let (oo, tt) = (dot(o, o), dot(t, t));
    if strict && (oo == T::zero() || tt == T::zero()) {
        return Err(Error::ZeroVector("global vector"));
    }
    Ok(cosine_from_parts(dot(o, t), oo, tt))
}

/// Level losses of one batch and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeLossReport {
    pub item: f64,
    pub style: f64,
    pub outfit: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl CompositeLossReport {
    /// `item + alpha * style + beta * outfit`.
    pub fn weighted_sum(&self) -> f64 {
        self.item + self.alpha * self.style + self.beta * self.outfit
    }
}

/// Level losses for a batch of matched pairs with every level enabled.
pub fn total_loss<T: Real>(
    batch: &[Pair<'_, T>],
    params: &HeadParams<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
) -> Result<CompositeLossReport> {
    level_losses(batch, params, cfg, weights, &LevelToggles::default())
}

/// Level losses for the enabled levels; disabled levels report 0 and are
/// left out of the total.
pub fn level_losses<T: Real>(
    batch: &[Pair<'_, T>],
    params: &HeadParams<T>,
    cfg: &ModelConfig,
    weights: &LossWeights,
    toggles: &LevelToggles,
) -> Result<CompositeLossReport> {
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "a contrastive batch needs at least 2 pairs, got {}",
            batch.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = bound.forward(&mut tape, cfg, weights, toggles, batch)?;
    let val = |v: Option<crate::numgraph::Var>| {
        v.map(|v| tape.value(v).item().to_f64().unwrap_or(f64::NAN))
            .unwrap_or(0.0)
    };
    Ok(CompositeLossReport {
        item: val(out.item_loss),
        style: val(out.style_loss),
        outfit: val(out.outfit_loss),
        total: val(Some(out.total)),
        alpha: if toggles.style { weights.alpha } else { 0.0 },
        beta: if toggles.outfit { weights.beta } else { 0.0 },
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::encoders::TransformerConfig;
    use crate::numgraph::Matrix;

    fn identity_layer(dim: usize) -> TransformerLayerParams<f64> {
        let cfg = TransformerConfig {
            heads: 2,
            ..TransformerConfig::default()
        };
        TransformerLayerParams::init(dim, &cfg, &mut ChaCha8Rng::seed_from_u64(0))
    }

    fn styles(rows: &[[f64; 4]]) -> StyleTokens<f64> {
        StyleTokens {
            centroids: Matrix::from_rows(rows),
            assignments: (0..rows.len()).collect(),
            seeds: (0..rows.len()).collect(),
            source: Side::Outfit,
        }
    }

    #[test]
    fn singleton_and_pair_means() {
        let layer = identity_layer(4);
        let one = outfit_vector(&styles(&[[0.5, -1.0, 2.0, 0.0]]), &layer).unwrap();
        assert_eq!(one.values, vec![0.5, -1.0, 2.0, 0.0]);
        let u = [1.0, 0.0, 3.0, -2.0];
        let v = [0.0, 2.0, 1.0, 4.0];
        let two = outfit_vector(&styles(&[u, v]), &layer).unwrap();
        for j in 0..4 {
            assert!((two.values[j] - (u[j] + v[j]) / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn pooling_ignores_centroid_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut layer = identity_layer(4);
        for v in layer.wo.as_mut_slice().iter_mut().chain(layer.w2.as_mut_slice()) {
            *v = rng.random_range(-0.5..0.5);
        }
        let rows: Vec<[f64; 4]> = (0..3)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let a = outfit_vector(&styles(&rows), &layer).unwrap();
        let b = outfit_vector(&styles(&[rows[2], rows[0], rows[1]]), &layer).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(outfit_similarity(&[0.3, -0.7], &[0.3, -0.7], true).unwrap(), 1.0);
        assert_eq!(outfit_similarity(&[1.0, 0.0], &[0.0, 2.0], true).unwrap(), 0.0);
        let s = outfit_similarity(&[1.0, 1.0], &[1.0, 0.0], true).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(matches!(
            outfit_similarity(&[0.0, 0.0], &[1.0, 0.0], true),
            Err(Error::ZeroVector(_))
        ));
        assert_eq!(outfit_similarity(&[0.0, 0.0], &[1.0, 0.0], false).unwrap(), 0.0);
    }

    #[test]
    fn cosine_scale_invariance() {
        let o = [0.3, -1.2, 0.8];
        let t = [1.0, 0.1, -0.4];
        let base = outfit_similarity(&o, &t, true).unwrap();
        for c in [0.001, 0.5, 7.0, 1e4] {
            let scaled: Vec<f64> = o.iter().map(|v| v * c).collect();
            assert!((outfit_similarity(&scaled, &t, true).unwrap() - base).abs() < 1e-14);
            assert!((outfit_similarity(&scaled, &o, true).unwrap() - 1.0).abs() < 1e-15);
        }
    }
}
