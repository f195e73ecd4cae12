//! Weighted token-wise interaction (WTI) similarity and the symmetric
//! InfoNCE loss built on it.
//!
//! For an outfit with item tokens `e_o` and a description with text tokens
//! `e_t`, the similarity is
//!
//! ```text
//! S = 1/(1+p) * ( sum_i w_o[i] * max_j cos(t_j, o_i)
//!               + p * sum_j w_t[j] * max_i cos(t_j, o_i) )
//! ```
//!
//! where `w_o = softmax(e_o a_o + b_o)` and `w_t = softmax(e_t a_t + b_t)`
//! are learned token weights taken over active tokens only.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgraph::{Groups, Mask, Matrix, Real, Tape, Var, NORM_EPS};
use crate::params::{ParamIds, ParamSet};

/// The two token-weighting heads, each a linear map `D -> 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WtiParams<T> {
    pub outfit_weight: Matrix<T>,
    pub outfit_bias: Matrix<T>,
    pub text_weight: Matrix<T>,
    pub text_bias: Matrix<T>,
}

impl<T: Real> WtiParams<T> {
    /// Zero weights: uniform token weighting.
    pub fn zeros(dim: usize) -> Self {
        Self {
            outfit_weight: Matrix::zeros(dim, 1),
            outfit_bias: Matrix::zeros(1, 1),
            text_weight: Matrix::zeros(dim, 1),
            text_bias: Matrix::zeros(1, 1),
        }
    }

    pub fn cast<U: Real>(&self) -> WtiParams<U> {
        WtiParams {
            outfit_weight: self.outfit_weight.cast(),
            outfit_bias: self.outfit_bias.cast(),
            text_weight: self.text_weight.cast(),
            text_bias: self.text_bias.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, ids: &mut ParamIds) -> BoundWti {
        let v = self.register(tape, ids);
        BoundWti {
            outfit_weight: v[0],
            outfit_bias: v[1],
            text_weight: v[2],
            text_bias: v[3],
        }
    }

    /// Softmax token weights for one side over its active rows.
    pub fn token_weights(&self, side: Side, e: &Matrix<T>, mask: &Mask) -> Result<Vec<T>> {
        let (w, b) = match side {
            Side::Outfit => (&self.outfit_weight, &self.outfit_bias),
            Side::Text => (&self.text_weight, &self.text_bias),
        };
        if e.cols() != w.rows() {
            return Err(Error::shape(
                "wti-weights",
                format!("tokens of width {} for head of width {}", e.cols(), w.rows()),
            ));
        }
        let logits: Vec<T> = mask
            .active_indices()
            .into_iter()
            .map(|i| {
                e.row(i)
                    .iter()
                    .zip(w.as_slice())
                    .fold(b.item(), |acc, (&x, &a)| acc + x * a)
            })
            .collect();
        if logits.is_empty() {
            return Err(Error::EmptyMask { op: "wti" });
        }
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
        let z: T = exps.iter().copied().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }
}

impl<T: Real> ParamSet<T> for WtiParams<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("outfit_weight".into(), &self.outfit_weight),
            ("outfit_bias".into(), &self.outfit_bias),
            ("text_weight".into(), &self.text_weight),
            ("text_bias".into(), &self.text_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![
            &mut self.outfit_weight,
            &mut self.outfit_bias,
            &mut self.text_weight,
            &mut self.text_bias,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Outfit,
    Text,
}

/// Semantic level a similarity matrix was computed at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Item,
    Style,
    Outfit,
}

/// BxB cross-modal scores; row = outfit, column = text. The diagonal holds
/// the matched pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub values: Matrix<T>,
    pub level: Level,
}

/// How the temperature hyperparameter enters the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    /// logits = S * scale (CLIP logit-scale convention).
    #[default]
    Multiply,
    /// logits = S / scale.
    Divide,
}

/// Loss hyperparameters shared by all levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub logit_scale: f64,
    pub temperature_mode: TemperatureMode,
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            logit_scale: 100.0,
            temperature_mode: TemperatureMode::Multiply,
            p: 0.2,
            alpha: 0.3,
            beta: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.logit_scale > 0.0) {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        if !(self.p >= 0.0 && self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("p, alpha and beta must be non-negative".into()));
        }
        Ok(())
    }

    /// Factor applied to similarities before the softmax.
    pub fn logit_factor(&self) -> f64 {
        match self.temperature_mode {
            TemperatureMode::Multiply => self.logit_scale,
            TemperatureMode::Divide => 1.0 / self.logit_scale,
        }
    }
}

/// One side's tokens prepared for scoring: the active rows with their
/// squared norms, plus their softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<T> {
    pub rows: Matrix<T>,
    pub sq_norms: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Real> TokenSet<T> {
    /// `strict` turns zero-norm rows into an error instead of flooring the
    /// norm.
    pub fn prepare(
        e: &Matrix<T>,
        params: &WtiParams<T>,
        side: Side,
        mask: &Mask,
        strict: bool,
    ) -> Result<Self> {
        if mask.len() != e.rows() {
            return Err(Error::shape(
                "wti",
                format!("mask length {} for {} tokens", mask.len(), e.rows()),
            ));
        }
        let weights = params.token_weights(side, e, mask)?;
        let rows = e.select_rows(&mask.active_indices());
        let sq_norms = squared_norms(&rows, strict)?;
        Ok(Self {
            rows,
            sq_norms,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

pub(crate) fn squared_norms<T: Real>(m: &Matrix<T>, strict: bool) -> Result<Vec<T>> {
    m.iter_rows()
        .map(|r| {
            let n = dot(r, r);
            if n == T::zero() && strict {
                Err(Error::ZeroVector("token embedding"))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// `a.b / sqrt(|a|^2 |b|^2)`. Taking one square root of the product makes
/// the cosine of a vector with itself exactly 1.
pub(crate) fn cosine_from_parts<T: Real>(ab: T, aa: T, bb: T) -> T {
    let eps = T::lit(NORM_EPS);
    ab / (aa * bb).sqrt().max(eps * eps)
}

/// Cosines between outfit tokens (rows) and text tokens (columns).
pub fn token_cosines<T: Real>(outfit: &TokenSet<T>, text: &TokenSet<T>) -> Matrix<T> {
    let mut c = Matrix::zeros(outfit.len(), text.len());
    for i in 0..outfit.len() {
        let o = outfit.rows.row(i);
        for j in 0..text.len() {
            c[(i, j)] = cosine_from_parts(
                dot(o, text.rows.row(j)),
                outfit.sq_norms[i],
                text.sq_norms[j],
            );
        }
    }
    c
}

/// The two directional WTI terms of a pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WtiTerms<T> {
    /// `sum_i w_o[i] max_j cos`: the outfit-token-weighted term.
    pub outfit_term: T,
    /// `sum_j w_t[j] max_i cos`: the text-token-weighted term.
    pub text_term: T,
}

impl<T: Real> WtiTerms<T> {
    pub fn combine(&self, p: T) -> T {
        (self.outfit_term + p * self.text_term) / (T::one() + p)
    }
}

pub fn wti_terms<T: Real>(outfit: &TokenSet<T>, text: &TokenSet<T>) -> WtiTerms<T> {
    let c = token_cosines(outfit, text);
    let mut outfit_term = T::zero();
    for i in 0..c.rows() {
        let m = c.row(i).iter().copied().fold(T::neg_infinity(), T::max);
        outfit_term = outfit_term + outfit.weights[i] * m;
    }
    let mut text_term = T::zero();
    for j in 0..c.cols() {
        let m = (0..c.rows())
            .map(|i| c[(i, j)])
            .fold(T::neg_infinity(), T::max);
        text_term = text_term + text.weights[j] * m;
    }
    WtiTerms {
        outfit_term,
        text_term,
    }
}

/// WTI similarity of one outfit/text pair.
pub fn wti_similarity<T: Real>(
    e_o: &Matrix<T>,
    e_t: &Matrix<T>,
    params: &WtiParams<T>,
    p: T,
    mask_o: &Mask,
    mask_t: &Mask,
) -> Result<T> {
    if e_o.cols() != e_t.cols() {
        return Err(Error::shape(
            "wti",
            format!("outfit width {} vs text width {}", e_o.cols(), e_t.cols()),
        ));
    }
    let o = TokenSet::prepare(e_o, params, Side::Outfit, mask_o, false)?;
    let t = TokenSet::prepare(e_t, params, Side::Text, mask_t, false)?;
    Ok(wti_terms(&o, &t).combine(p))
}

/// Tape handles for a bound [`WtiParams`].
#[derive(Debug, Clone, Copy)]
pub struct BoundWti {
    outfit_weight: Var,
    outfit_bias: Var,
    text_weight: Var,
    text_bias: Var,
}

/// Token rows of several samples stacked vertically, one group per sample.
#[derive(Debug, Clone)]
pub struct StackedTokens {
    pub rows: Var,
    pub groups: Rc<Groups>,
}

impl BoundWti {
    fn weights<T: Real>(&self, tape: &mut Tape<T>, side: Side, x: &StackedTokens) -> Result<Var> {
        let (w, b) = match side {
            Side::Outfit => (self.outfit_weight, self.outfit_bias),
            Side::Text => (self.text_weight, self.text_bias),
        };
        let logits = tape.matmul(x.rows, w)?;
        let logits = tape.add_row(logits, b)?;
        tape.group_softmax_col(logits, x.groups.clone())
    }

    /// BxB WTI matrix for stacked outfits (rows) against stacked texts
    /// (columns), recorded on the tape.
    pub fn batch_similarity<T: Real>(
        &self,
        tape: &mut Tape<T>,
        outfits: &StackedTokens,
        texts: &StackedTokens,
        p: T,
    ) -> Result<Var> {
        let w_o = self.weights(tape, Side::Outfit, outfits)?;
        let w_t = self.weights(tape, Side::Text, texts)?;
        let cos = tape.cosine_matrix(outfits.rows, texts.rows)?;
        // outfit token i vs best token of text m
        let best_t = tape.group_row_max(cos, &texts.groups)?;
        let weighted = tape.mul_rows(best_t, w_o)?;
        let outfit_term = tape.group_sum(weighted, outfits.groups.clone())?;
        if p == T::zero() {
            return Ok(outfit_term);
        }
        // text token j vs best item of outfit n
        let cos_t = tape.transpose(cos);
        let best_o = tape.group_row_max(cos_t, &outfits.groups)?;
        let weighted = tape.mul_rows(best_o, w_t)?;
        let text_term = tape.group_sum(weighted, texts.groups.clone())?;
        let text_term = tape.transpose(text_term);
        let text_term = tape.scale(text_term, p);
        let sum = tape.add(outfit_term, text_term)?;
        Ok(tape.scale(sum, T::one() / (T::one() + p)))
    }
}

/// Symmetric InfoNCE over a square similarity matrix recorded on the tape:
/// `-(1/B) * (sum_n log softmax_row(n)[n] + sum_m log softmax_col(m)[m])`
/// with logits `S * factor`.
pub fn info_nce_on_tape<T: Real>(tape: &mut Tape<T>, s: Var, factor: T) -> Result<Var> {
    let (b, c) = tape.shape(s);
    if b != c {
        return Err(Error::shape("info-nce", format!("non-square {b}x{c}")));
    }
    let logits = tape.scale(s, factor);
    let rows = tape.log_softmax_rows(logits);
    let row_term = tape.trace(rows)?;
    let logits_t = tape.transpose(logits);
    let cols = tape.log_softmax_rows(logits_t);
    let col_term = tape.trace(cols)?;
    let total = tape.add(row_term, col_term)?;
    Ok(tape.scale(total, -T::one() / T::lit(b as f64)))
}

/// Value-only symmetric InfoNCE with logits `S * factor`.
pub fn info_nce<T: Real>(s: &SimilarityMatrix<T>, factor: T) -> Result<T> {
    let mut tape = Tape::new();
    let v = tape.constant(s.values.clone());
    let l = info_nce_on_tape(&mut tape, v, factor)?;
    Ok(tape.value(l).item())
}

/// Row-direction and column-direction halves of the InfoNCE sum, each
/// divided by B (their sum is the full loss).
pub fn info_nce_directions<T: Real>(s: &Matrix<T>, factor: T) -> Result<(T, T)> {
    if s.rows() != s.cols() {
        return Err(Error::shape(
            "info-nce",
            format!("non-square {}x{}", s.rows(), s.cols()),
        ));
    }
    let b = T::lit(s.rows() as f64);
    let half = |m: &Matrix<T>| -> T {
        let mut acc = T::zero();
        for i in 0..m.rows() {
            let row: Vec<T> = m.row(i).iter().map(|&v| v * factor).collect();
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            acc = acc - (row[i] - lse);
        }
        acc / b
    };
    Ok((half(s), half(&s.transpose())))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn random_heads(dim: usize, rng: &mut ChaCha8Rng) -> WtiParams<f64> {
        WtiParams {
            outfit_weight: random(dim, 1, rng),
            outfit_bias: random(1, 1, rng),
            text_weight: random(dim, 1, rng),
            text_bias: random(1, 1, rng),
        }
    }

    fn sim(o: &Matrix<f64>, t: &Matrix<f64>, params: &WtiParams<f64>, p: f64) -> f64 {
        wti_similarity(o, t, params, p, &Mask::all(o.rows()), &Mask::all(t.rows())).unwrap()
    }

    #[test]
    fn single_pair_identity_and_orthogonal() {
        let params = WtiParams::zeros(3);
        let v = Matrix::from_rows(&[[0.3, -1.2, 2.0]]);
        for p in [0.0, 0.2, 1.0, 7.5] {
            assert_eq!(sim(&v, &v, &params, p), 1.0);
            let u = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
            let orth = Matrix::from_rows(&[[0.0, 4.0, 0.0]]);
            assert_eq!(sim(&u, &orth, &params, p), 0.0);
        }
    }

    #[test]
    fn two_by_two_reference_value() {
        // Direct evaluation: outfit term = (1 + h)/2, text term = (1 + h)/2
        // with h = sqrt(2)/2, so the combination is (1 + h)/2 for any p.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let o = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let t = Matrix::from_rows(&[[1.0, 0.0], [h, h]]);
        let s = sim(&o, &t, &WtiParams::zeros(2), 0.2);
        assert!((s - 0.853_553_390_593_273_7).abs() < 1e-12, "{s}");
    }

    #[test]
    fn zero_vector_strict_mode() {
        let params = WtiParams::<f64>::zeros(2);
        let z = Matrix::from_rows(&[[0.0, 0.0]]);
        assert!(TokenSet::prepare(&z, &params, Side::Outfit, &Mask::all(1), true).is_err());
        assert!(TokenSet::prepare(&z, &params, Side::Outfit, &Mask::all(1), false).is_ok());
    }

    #[test]
    fn all_masked_side_is_error() {
        let params = WtiParams::<f64>::zeros(2);
        let o = Matrix::from_rows(&[[1.0, 0.0]]);
        let err = TokenSet::prepare(&o, &params, Side::Outfit, &Mask::all(0), false);
        assert!(err.is_err());
        assert!(Mask::new(vec![false]).is_err());
    }

    #[test]
    fn masked_tokens_are_ignored() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = random_heads(4, &mut rng);
        let o = random(3, 4, &mut rng);
        let t = random(4, 4, &mut rng);
        let mask_t = Mask::new(vec![true, false, true, true]).unwrap();
        let full = wti_similarity(&o, &t, &params, 0.4, &Mask::all(3), &mask_t).unwrap();
        let dropped = sim(&o, &t.select_rows(&[0, 2, 3]), &params, 0.4);
        assert!((full - dropped).abs() < 1e-15);
    }

    fn batch_matrix(
        outfits: &[Matrix<f64>],
        texts: &[Matrix<f64>],
        params: &WtiParams<f64>,
        p: f64,
    ) -> Matrix<f64> {
        let mut tape = Tape::new();
        let mut ids = ParamIds::new();
        let bound = params.bind(&mut tape, &mut ids);
        let stack = |tape: &mut Tape<f64>, ms: &[Matrix<f64>]| StackedTokens {
            rows: tape.constant(Matrix::vstack(ms).unwrap()),
            groups: Rc::new(Groups::segments(
                &ms.iter().map(|m| m.rows()).collect::<Vec<_>>(),
            )),
        };
        let so = stack(&mut tape, outfits);
        let st = stack(&mut tape, texts);
        let s = bound.batch_similarity(&mut tape, &so, &st, p).unwrap();
        tape.value(s).clone()
    }

    #[test]
    fn batch_matches_pairwise_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = random_heads(6, &mut rng);
        let outfits: Vec<_> = [3, 1, 5, 2].iter().map(|&n| random(n, 6, &mut rng)).collect();
        let texts: Vec<_> = [2, 4, 1, 7].iter().map(|&n| random(n, 6, &mut rng)).collect();
        for p in [0.0, 0.2, 1.0] {
            let m = batch_matrix(&outfits, &texts, &params, p);
            for (n, o) in outfits.iter().enumerate() {
                for (k, t) in texts.iter().enumerate() {
                    assert!((m[(n, k)] - sim(o, t, &params, p)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn degenerate_and_duplicated_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let params = random_heads(4, &mut rng);
        let o = random(3, 4, &mut rng);
        let t = random(2, 4, &mut rng);
        let single = batch_matrix(&[o.clone()], &[t.clone()], &params, 0.2);
        assert_eq!(single.shape(), (1, 1));
        assert!((single.item() - sim(&o, &t, &params, 0.2)).abs() < 1e-12);
        let dup = batch_matrix(&[o.clone(), o], &[t.clone(), t], &params, 0.2);
        let first = dup[(0, 0)];
        assert!(dup.as_slice().iter().all(|&v| (v - first).abs() < 1e-15));
    }

    #[test]
    fn batch_relabel_permutes_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = random_heads(4, &mut rng);
        let outfits: Vec<_> = (0..3).map(|i| random(i + 1, 4, &mut rng)).collect();
        let texts: Vec<_> = (0..3).map(|i| random(3 - i, 4, &mut rng)).collect();
        let m = batch_matrix(&outfits, &texts, &params, 0.2);
        let perm = [2usize, 0, 1];
        let po: Vec<_> = perm.iter().map(|&i| outfits[i].clone()).collect();
        let pt: Vec<_> = perm.iter().map(|&i| texts[i].clone()).collect();
        let mp = batch_matrix(&po, &pt, &params, 0.2);
        for a in 0..3 {
            for b in 0..3 {
                assert!((mp[(a, b)] - m[(perm[a], perm[b])]).abs() < 1e-12);
            }
        }
    }

    fn sm(values: Matrix<f64>) -> SimilarityMatrix<f64> {
        SimilarityMatrix {
            values,
            level: Level::Item,
        }
    }

    #[test]
    fn info_nce_closed_forms() {
        let id = sm(Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        let expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((info_nce(&id, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((info_nce(&id, 1.0).unwrap() - 0.62652).abs() < 1e-4);
        let flat = sm(Matrix::filled(2, 2, 0.37));
        assert!((info_nce(&flat, 1.0).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(info_nce(&sm(Matrix::zeros(2, 3)), 1.0).is_err());
    }

    #[test]
    fn info_nce_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for c in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0] {
            let l = info_nce(&sm(Matrix::identity(3).scaled(c)), 1.0).unwrap();
            assert!(l < last);
            last = l;
        }
        assert!(last < 1e-12);
    }

    #[test]
    fn direction_halves() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = random(4, 4, &mut rng);
        let (r, c) = info_nce_directions(&s, 3.0).unwrap();
        assert!((r + c - info_nce(&sm(s.clone()), 3.0).unwrap()).abs() < 1e-12);
        // A constant added to one row leaves the row term unchanged and
        // moves the column term.
        let mut shifted = s.clone();
        for v in shifted.row_mut(1) {
            *v += 0.7;
        }
        let (r2, c2) = info_nce_directions(&shifted, 3.0).unwrap();
        assert!((r - r2).abs() < 1e-12);
        assert!((c - c2).abs() > 1e-6);
    }

    proptest! {
        #[test]
        fn p_zero_is_outfit_term(seed in 0u64..5000, no in 1usize..6, nt in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_heads(5, &mut rng);
            let o = random(no, 5, &mut rng);
            let t = random(nt, 5, &mut rng);
            let os = TokenSet::prepare(&o, &params, Side::Outfit, &Mask::all(no), false).unwrap();
            let ts = TokenSet::prepare(&t, &params, Side::Text, &Mask::all(nt), false).unwrap();
            prop_assert_eq!(sim(&o, &t, &params, 0.0), wti_terms(&os, &ts).outfit_term);
        }

        #[test]
        fn similarity_in_unit_interval(seed in 0u64..5000, p in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_heads(3, &mut rng);
            let s = sim(&random(4, 3, &mut rng), &random(3, 3, &mut rng), &params, p);
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn token_order_invariant(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_heads(4, &mut rng);
            let o = random(4, 4, &mut rng);
            let t = random(3, 4, &mut rng);
            let a = sim(&o, &t, &params, 0.2);
            let b = sim(&o.select_rows(&[2, 0, 3, 1]), &t.select_rows(&[1, 2, 0]), &params, 0.2);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn diagonal_maxima_give_nonnegative_loss(seed in 0u64..5000, scale in 0.1f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = random(4, 4, &mut rng);
            for i in 0..4 { s[(i, i)] = 1.5; }
            prop_assert!(info_nce(&sm(s), scale).unwrap() >= 0.0);
        }
    }
}
