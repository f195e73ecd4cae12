//! Transformer set-encoders (no positional signal) and per-modality linear
//! adapters over the frozen token embeddings.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numgraph::{Groups, Mask, Matrix, Real, Tape, Var};
use crate::params::{prefixed, ParamIds, ParamSet};

/// Shape hyperparameters shared by all transformer encoders of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransformerConfig {
    pub heads: usize,
    /// Feed-forward width as a multiple of the embedding width.
    pub ffn_mult: usize,
    pub depth: usize,
    /// Permits `depth != 1`.
    pub allow_depth_override: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            ffn_mult: 4,
            depth: 1,
            allow_depth_override: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.depth != 1 && !self.allow_depth_override {
            return Err(Error::Config(format!(
                "transformer depth must be 1 (got {}); set allow_depth_override to change it",
                self.depth
            )));
        }
        if self.depth == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return Err(Error::Config(
                "depth, heads and ffn_mult must be positive".into(),
            ));
        }
        if dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {dim} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm encoder layer: `x + Attn(LN(x))`, then `+ FFN(LN(.))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerLayerParams<T> {
    pub heads: usize,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Matrix<T>,
    pub w2: Matrix<T>,
    pub b2: Matrix<T>,
    pub ln1_gain: Matrix<T>,
    pub ln1_bias: Matrix<T>,
    pub ln2_gain: Matrix<T>,
    pub ln2_bias: Matrix<T>,
}

fn uniform<T: Real>(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Matrix<T> {
    let data = (0..rows * cols)
        .map(|_| T::lit(rng.random_range(-bound..=bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

impl<T: Real> TransformerLayerParams<T> {
    /// Input projections and the first FFN matrix are drawn from
    /// `U(-1/sqrt(D), 1/sqrt(D))`; the attention-output and FFN-output
    /// projections start at zero so the untrained layer is the identity.
    pub fn init(dim: usize, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        let hidden = dim * cfg.ffn_mult;
        let bound = 1.0 / (dim as f64).sqrt();
        Self {
            heads: cfg.heads,
            wq: uniform(dim, dim, bound, rng),
            wk: uniform(dim, dim, bound, rng),
            wv: uniform(dim, dim, bound, rng),
            wo: Matrix::zeros(dim, dim),
            w1: uniform(dim, hidden, bound, rng),
            b1: Matrix::zeros(1, hidden),
            w2: Matrix::zeros(hidden, dim),
            b2: Matrix::zeros(1, dim),
            ln1_gain: Matrix::filled(1, dim, T::one()),
            ln1_bias: Matrix::zeros(1, dim),
            ln2_gain: Matrix::filled(1, dim, T::one()),
            ln2_bias: Matrix::zeros(1, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn cast<U: Real>(&self) -> TransformerLayerParams<U> {
        TransformerLayerParams {
            heads: self.heads,
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wo: self.wo.cast(),
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
            ln1_gain: self.ln1_gain.cast(),
            ln1_bias: self.ln1_bias.cast(),
            ln2_gain: self.ln2_gain.cast(),
            ln2_bias: self.ln2_bias.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, ids: &mut ParamIds) -> BoundLayer {
        let mut v = self.register(tape, ids).into_iter();
        let mut next = || v.next().expect("tensor count");
        BoundLayer {
            heads: self.heads,
            wq: next(),
            wk: next(),
            wv: next(),
            wo: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
            ln1_gain: next(),
            ln1_bias: next(),
            ln2_gain: next(),
            ln2_bias: next(),
        }
    }
}

impl<T: Real> ParamSet<T> for TransformerLayerParams<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
            ("wo".into(), &self.wo),
            ("w1".into(), &self.w1),
            ("b1".into(), &self.b1),
            ("w2".into(), &self.w2),
            ("b2".into(), &self.b2),
            ("ln1_gain".into(), &self.ln1_gain),
            ("ln1_bias".into(), &self.ln1_bias),
            ("ln2_gain".into(), &self.ln2_gain),
            ("ln2_bias".into(), &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    heads: usize,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    ln1_gain: Var,
    ln1_bias: Var,
    ln2_gain: Var,
    ln2_bias: Var,
}

impl BoundLayer {
    /// Encodes the rows of `x`. Rows attend only to rows of the same group;
    /// rows without a group neither attend nor are attended to, and come
    /// out as zeros. Independent samples are stacked into one matrix with
    /// one group per sample.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, groups: &Groups) -> Result<Var> {
        let (rows, dim) = tape.shape(x);
        if groups.len() != rows {
            return Err(Error::shape(
                "transformer",
                format!("{rows} rows with {} group entries", groups.len()),
            ));
        }
        if (0..rows).all(|i| groups.group_of(i).is_none()) {
            return Err(Error::EmptyMask { op: "transformer" });
        }
        let dh = dim / self.heads;
        let h = tape.layer_norm(x, self.ln1_gain, self.ln1_bias)?;
        let q = tape.matmul(h, self.wq)?;
        let k = tape.matmul(h, self.wk)?;
        let v = tape.matmul(h, self.wv)?;
        let scale = T::one() / T::lit(dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let qh = tape.col_slice(q, head * dh, dh)?;
            let kh = tape.col_slice(k, head * dh, dh)?;
            let vh = tape.col_slice(v, head * dh, dh)?;
            let kt = tape.transpose(kh);
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.grouped_softmax_rows(s, groups, groups)?;
            heads.push(tape.matmul(a, vh)?);
        }
        let att = tape.concat_cols(&heads)?;
        let att = tape.matmul(att, self.wo)?;
        let x1 = tape.add(x, att)?;
        let h2 = tape.layer_norm(x1, self.ln2_gain, self.ln2_bias)?;
        let f = tape.matmul(h2, self.w1)?;
        let f = tape.add_row(f, self.b1)?;
        let f = tape.gelu(f);
        let f = tape.matmul(f, self.w2)?;
        let f = tape.add_row(f, self.b2)?;
        let out = tape.add(x1, f)?;
        if (0..rows).any(|i| groups.group_of(i).is_none()) {
            let keep = Matrix::from_vec(
                rows,
                1,
                (0..rows)
                    .map(|i| {
                        if groups.group_of(i).is_some() {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )?;
            let keep = tape.constant(keep);
            return tape.mul_rows(out, keep);
        }
        Ok(out)
    }
}

/// A stack of encoder layers; exactly one unless the depth override is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerEncoder<T> {
    pub layers: Vec<TransformerLayerParams<T>>,
}

impl<T: Real> TransformerEncoder<T> {
    pub fn init(dim: usize, cfg: &TransformerConfig, rng: &mut impl Rng) -> Self {
        Self {
            layers: (0..cfg.depth)
                .map(|_| TransformerLayerParams::init(dim, cfg, rng))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> TransformerEncoder<U> {
        TransformerEncoder {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, ids: &mut ParamIds) -> BoundEncoder {
        BoundEncoder {
            layers: self.layers.iter().map(|l| l.bind(tape, ids)).collect(),
        }
    }
}

impl<T: Real> ParamSet<T> for TransformerEncoder<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("layer{i}"), l.tensors()))
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.tensors_mut())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    layers: Vec<BoundLayer>,
}

impl BoundEncoder {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var, groups: &Groups) -> Result<Var> {
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(tape, h, groups))
    }
}

/// Encodes a single token set. Inactive positions are excluded from
/// attention and zeroed in the output.
pub fn transformer_layer_forward<T: Real>(
    x: &Matrix<T>,
    params: &TransformerLayerParams<T>,
    mask: &Mask,
) -> Result<Matrix<T>> {
    if mask.len() != x.rows() {
        return Err(Error::shape(
            "transformer",
            format!("mask length {} for {} rows", mask.len(), x.rows()),
        ));
    }
    if x.cols() != params.dim() {
        return Err(Error::shape(
            "transformer",
            format!("input width {} for layer width {}", x.cols(), params.dim()),
        ));
    }
    let mut tape = Tape::new();
    let mut ids = ParamIds::new();
    let bound = params.bind(&mut tape, &mut ids);
    let xv = tape.constant(x.clone());
    let y = bound.forward(&mut tape, xv, &Groups::from_mask(mask))?;
    Ok(tape.value(y).clone())
}

/// Per-modality affine map `X W + b` applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams<T> {
    pub weight: Matrix<T>,
    pub bias: Matrix<T>,
}

impl<T: Real> AdapterParams<T> {
    /// Identity weight, zero bias.
    pub fn identity(dim: usize) -> Self {
        Self {
            weight: Matrix::identity(dim),
            bias: Matrix::zeros(1, dim),
        }
    }

    pub fn cast<U: Real>(&self) -> AdapterParams<U> {
        AdapterParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, ids: &mut ParamIds) -> BoundAdapter {
        let v = self.register(tape, ids);
        BoundAdapter {
            weight: v[0],
            bias: v[1],
        }
    }
}

impl<T: Real> ParamSet<T> for AdapterParams<T> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundAdapter {
    weight: Var,
    bias: Var,
}

impl BoundAdapter {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

pub fn apply_adapter<T: Real>(x: &Matrix<T>, params: &AdapterParams<T>) -> Result<Matrix<T>> {
    if x.cols() != params.weight.rows() {
        return Err(Error::shape(
            "adapter",
            format!("input width {} for adapter {:?}", x.cols(), params.weight.shape()),
        ));
    }
    let mut y = x.matmul(&params.weight)?;
    let b = params.bias.row(0).to_vec();
    for i in 0..y.rows() {
        for (o, &bj) in y.row_mut(i).iter_mut().zip(&b) {
            *o = *o + bj;
        }
    }
    Ok(y)
}
