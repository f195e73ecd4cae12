//! Reverse-mode differentiation over a fixed set of dense-matrix operations.
//!
//! Operations are recorded in execution order on a [`Tape`]; every node's
//! inputs precede it, so a single reverse sweep in tape order accumulates
//! all gradients deterministically.

use std::rc::Rc;

use super::matrix::{matmul_nt_into, matmul_tn_into, Groups, Mask, Matrix, Real};
use crate::error::{Error, Result};

/// Handle to a node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Self {
        Self(i)
    }
}

const GELU_C: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;
/// Norm floor used by row normalization.
pub const NORM_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    MulRows(Var, Var),
    Transpose(Var),
    RowL2Normalize { x: Var, norms: Vec<T> },
    SoftmaxRows(Var),
    GroupSoftmaxCol(Var, Rc<Groups>),
    GroupRowMax { x: Var, argmax: Vec<usize> },
    GroupMean(Var, Rc<Groups>),
    GroupSum(Var, Rc<Groups>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    ColSlice { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    LogSoftmaxRows(Var),
    Trace(Var),
    Sum(Var),
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

/// Record of executed operations plus the registered trainable leaves.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Matrix<T>>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(usize, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; a zero matrix when the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Matrix<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Matrix::zeros(r, c)
            }
        }
    }

    /// Gradient for a registered parameter id, summed over every leaf that
    /// was registered under that id.
    pub fn param(&self, id: usize) -> Option<Matrix<T>> {
        let mut out: Option<Matrix<T>> = None;
        for &(pid, v) in &self.params {
            if pid == id {
                let g = self.wrt(v);
                match &mut out {
                    Some(acc) => acc.add_assign(&g),
                    None => out = Some(g),
                }
            }
        }
        out
    }

    pub fn param_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.iter().map(|&(id, _)| id)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf registered under `id`.
    pub fn param(&mut self, id: usize, value: Matrix<T>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `x + bias` with a 1xC bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + bias {:?}", vx.shape(), vb.shape()),
            ));
        }
        let mut out = vx.clone();
        let b = vb.row(0).to_vec();
        for i in 0..out.rows() {
            for (o, &bj) in out.row_mut(i).iter_mut().zip(&b) {
                *o = *o + bj;
            }
        }
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scaled(c);
        self.push(out, Op::Scale(x, c))
    }

    /// Multiplies row `i` of `x` by `w[i]`, `w` being an Rx1 column.
    pub fn mul_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vw.cols() != 1 || vw.rows() != vx.rows() {
            return Err(Error::shape(
                "mul_rows",
                format!("{:?} by column {:?}", vx.shape(), vw.shape()),
            ));
        }
        let mut out = vx.clone();
        for i in 0..out.rows() {
            let wi = vw[(i, 0)];
            for o in out.row_mut(i) {
                *o = *o * wi;
            }
        }
        Ok(self.push(out, Op::MulRows(x, w)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.push(out, Op::Transpose(x))
    }

    /// Scales each row to unit L2 norm (norm floored at [`NORM_EPS`]).
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let eps = T::lit(NORM_EPS);
        let mut out = vx.clone();
        let mut norms = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let n = vx.row(i).iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for o in out.row_mut(i) {
                *o = *o / n;
            }
        }
        self.push(out, Op::RowL2Normalize { x, norms })
    }

    /// Row-wise softmax where entry `(i, j)` participates only when row `i`
    /// and column `j` belong to the same group. Rows with no admissible
    /// entry produce zeros.
    pub fn grouped_softmax_rows(
        &mut self,
        x: Var,
        row_groups: &Groups,
        col_groups: &Groups,
    ) -> Result<Var> {
        let vx = self.value(x);
        if row_groups.len() != vx.rows() || col_groups.len() != vx.cols() {
            return Err(Error::shape(
                "masked-softmax",
                format!(
                    "{:?} with {} row / {} column groups",
                    vx.shape(),
                    row_groups.len(),
                    col_groups.len()
                ),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), vx.cols());
        for i in 0..vx.rows() {
            let Some(gi) = row_groups.group_of(i) else {
                continue;
            };
            let row = vx.row(i);
            let allowed = |j: usize| col_groups.group_of(j) == Some(gi);
            let mut m = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > m {
                    m = v;
                }
            }
            if m == T::neg_infinity() {
                continue;
            }
            let orow = out.row_mut(i);
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - m).exp();
                    orow[j] = e;
                    z = z + e;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / z;
            }
        }
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Softmax along each row restricted to the mask's active columns.
    pub fn masked_softmax(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        if mask.active_count() == 0 {
            return Err(Error::EmptyMask {
                op: "masked-softmax",
            });
        }
        let rows = Groups::segments(&[self.shape(x).0]);
        self.grouped_softmax_rows(x, &rows, &Groups::from_mask(mask))
    }

    /// Softmax of an Rx1 column taken separately within each group.
    pub fn group_softmax_col(&mut self, x: Var, groups: Rc<Groups>) -> Result<Var> {
        let vx = self.value(x);
        if vx.cols() != 1 || vx.rows() != groups.len() {
            return Err(Error::shape(
                "group-softmax",
                format!("{:?} with {} groups entries", vx.shape(), groups.len()),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), 1);
        for members in groups.members() {
            if members.is_empty() {
                continue;
            }
            let m = members
                .iter()
                .map(|&i| vx[(i, 0)])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &i in &members {
                let e = (vx[(i, 0)] - m).exp();
                out[(i, 0)] = e;
                z = z + e;
            }
            for &i in &members {
                out[(i, 0)] = out[(i, 0)] / z;
            }
        }
        Ok(self.push(out, Op::GroupSoftmaxCol(x, groups)))
    }

    /// For every row, the maximum over each column group: RxC -> RxG.
    /// Ties resolve to the lowest column index.
    pub fn group_row_max(&mut self, x: Var, col_groups: &Groups) -> Result<Var> {
        let vx = self.value(x);
        if col_groups.len() != vx.cols() {
            return Err(Error::shape(
                "masked-row-max",
                format!("{:?} with {} column groups", vx.shape(), col_groups.len()),
            ));
        }
        if col_groups.sizes().contains(&0) {
            return Err(Error::EmptyMask {
                op: "masked-row-max",
            });
        }
        let g = col_groups.count();
        let mut out = Matrix::filled(vx.rows(), g, T::neg_infinity());
        let mut argmax = vec![usize::MAX; vx.rows() * g];
        for i in 0..vx.rows() {
            for (j, &v) in vx.row(i).iter().enumerate() {
                if let Some(gj) = col_groups.group_of(j) {
                    if v > out[(i, gj)] || argmax[i * g + gj] == usize::MAX {
                        out[(i, gj)] = v;
                        argmax[i * g + gj] = j;
                    }
                }
            }
        }
        Ok(self.push(out, Op::GroupRowMax { x, argmax }))
    }

    /// Row-wise maximum over the mask's active columns: RxC -> Rx1.
    pub fn masked_row_max(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        if mask.active_count() == 0 {
            return Err(Error::EmptyMask {
                op: "masked-row-max",
            });
        }
        self.group_row_max(x, &Groups::from_mask(mask))
    }

    fn check_row_groups(&self, op: &'static str, x: Var, groups: &Groups) -> Result<()> {
        if groups.len() != self.shape(x).0 {
            return Err(Error::shape(
                op,
                format!("{:?} with {} row groups", self.shape(x), groups.len()),
            ));
        }
        Ok(())
    }

    /// Mean of the rows in each group: RxC -> GxC. Every group must be
    /// nonempty.
    pub fn group_mean(&mut self, x: Var, groups: Rc<Groups>) -> Result<Var> {
        self.check_row_groups("masked-mean", x, &groups)?;
        let sizes = groups.sizes();
        if sizes.contains(&0) {
            return Err(Error::EmptyMask { op: "masked-mean" });
        }
        let mut out = group_sum_value(self.value(x), &groups);
        for (g, &n) in sizes.iter().enumerate() {
            let inv = T::one() / T::lit(n as f64);
            for o in out.row_mut(g) {
                *o = *o * inv;
            }
        }
        Ok(self.push(out, Op::GroupMean(x, groups)))
    }

    /// Mean over the mask's active rows: RxC -> 1xC.
    pub fn masked_mean(&mut self, x: Var, mask: &Mask) -> Result<Var> {
        self.group_mean(x, Rc::new(Groups::from_mask(mask)))
    }

    /// Sum of the rows in each group: RxC -> GxC.
    pub fn group_sum(&mut self, x: Var, groups: Rc<Groups>) -> Result<Var> {
        self.check_row_groups("group-sum", x, &groups)?;
        let out = group_sum_value(self.value(x), &groups);
        Ok(self.push(out, Op::GroupSum(x, groups)))
    }

    /// Row-wise layer normalization with 1xC gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let c = vx.cols();
        if vg.shape() != (1, c) || vb.shape() != (1, c) {
            return Err(Error::shape(
                "layer-norm",
                format!(
                    "{:?} with gain {:?} bias {:?}",
                    vx.shape(),
                    vg.shape(),
                    vb.shape()
                ),
            ));
        }
        let n = T::lit(c as f64);
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Matrix::zeros(vx.rows(), c);
        let mut out = Matrix::zeros(vx.rows(), c);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[(i, j)] = h;
                out[(i, j)] = h * vg[(0, j)] + vb[(0, j)];
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let vx = self.value(x);
        if start + len > vx.cols() {
            return Err(Error::shape(
                "col-slice",
                format!("columns {start}..{} of {:?}", start + len, vx.shape()),
            ));
        }
        let mut out = Matrix::zeros(vx.rows(), len);
        for i in 0..vx.rows() {
            out.row_mut(i)
                .copy_from_slice(&vx.row(i)[start..start + len]);
        }
        Ok(self.push(out, Op::ColSlice { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts.first().map_or(0, |&p| self.shape(p).0);
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::shape("concat-cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let r = self.value(p).row(i);
                out.row_mut(i)[off..off + r.len()].copy_from_slice(r);
                off += r.len();
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = vx.clone();
        for i in 0..vx.rows() {
            let row = vx.row(i);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            for o in out.row_mut(i) {
                *o = *o - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(x))
    }

    pub fn trace(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.rows() != vx.cols() {
            return Err(Error::shape("trace", format!("{:?}", vx.shape())));
        }
        let t = (0..vx.rows()).map(|i| vx[(i, i)]).sum();
        Ok(self.push(Matrix::scalar(t), Op::Trace(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Matrix::scalar(s), Op::Sum(x))
    }

    /// Pairwise cosine similarities between the rows of `a` and `b`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).1 != self.shape(b).1 {
            return Err(Error::shape(
                "cosine-matrix",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let na = self.row_l2_normalize(a);
        let nb = self.row_l2_normalize(b);
        let nbt = self.transpose(nb);
        self.matmul(na, nbt)
    }

    /// Reverse sweep from a scalar loss.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, idx: usize, g: &Matrix<T>, grads: &mut [Option<Matrix<T>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let ga = slot(grads, *a, va.shape());
                matmul_nt_into(g, vb, ga);
                let gb = slot(grads, *b, vb.shape());
                matmul_tn_into(va, g, gb);
            }
            Op::Add(a, b) => {
                slot(grads, *a, g.shape()).add_assign(g);
                slot(grads, *b, g.shape()).add_assign(g);
            }
            Op::AddRow(x, bias) => {
                slot(grads, *x, g.shape()).add_assign(g);
                let gb = slot(grads, *bias, (1, g.cols()));
                for row in g.iter_rows() {
                    for (o, &v) in gb.as_mut_slice().iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            Op::Scale(x, c) => {
                let gx = slot(grads, *x, g.shape());
                for (o, &v) in gx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *o = *o + *c * v;
                }
            }
            Op::MulRows(x, w) => {
                let (vx, vw) = (self.value(*x), self.value(*w));
                let gx = slot(grads, *x, vx.shape());
                for i in 0..vx.rows() {
                    let wi = vw[(i, 0)];
                    for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(i)) {
                        *o = *o + wi * v;
                    }
                }
                let gw = slot(grads, *w, vw.shape());
                for i in 0..vx.rows() {
                    let d: T = vx.row(i).iter().zip(g.row(i)).map(|(&a, &b)| a * b).sum();
                    gw[(i, 0)] = gw[(i, 0)] + d;
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                slot(grads, *x, gt.shape()).add_assign(&gt);
            }
            Op::RowL2Normalize { x, norms } => {
                let vx = self.value(*x);
                let eps = T::lit(NORM_EPS);
                let gx = slot(grads, *x, vx.shape());
                for i in 0..vx.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let n = norms[i];
                    let dot: T = if n > eps {
                        yr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                    } else {
                        T::zero()
                    };
                    for ((o, &gv), &yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = *o + (gv - yv * dot) / n;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let gx = slot(grads, *x, y.shape());
                for i in 0..y.rows() {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &gv), &yv) in gx.row_mut(i).iter_mut().zip(gr).zip(yr) {
                        *o = *o + yv * (gv - dot);
                    }
                }
            }
            Op::GroupSoftmaxCol(x, groups) => {
                let gx = slot(grads, *x, y.shape());
                for members in groups.members() {
                    let dot: T = members.iter().map(|&i| y[(i, 0)] * g[(i, 0)]).sum();
                    for &i in &members {
                        gx[(i, 0)] = gx[(i, 0)] + y[(i, 0)] * (g[(i, 0)] - dot);
                    }
                }
            }
            Op::GroupRowMax { x, argmax } => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                let gcount = y.cols();
                for i in 0..y.rows() {
                    for k in 0..gcount {
                        let j = argmax[i * gcount + k];
                        gx[(i, j)] = gx[(i, j)] + g[(i, k)];
                    }
                }
            }
            Op::GroupMean(x, groups) => {
                let sizes = groups.sizes();
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                for i in 0..shape.0 {
                    if let Some(k) = groups.group_of(i) {
                        let inv = T::one() / T::lit(sizes[k] as f64);
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o = *o + v * inv;
                        }
                    }
                }
            }
            Op::GroupSum(x, groups) => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                for i in 0..shape.0 {
                    if let Some(k) = groups.group_of(i) {
                        for (o, &v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let vg = self.value(*gain);
                let c = xhat.cols();
                let n = T::lit(c as f64);
                {
                    let ggain = slot(grads, *gain, (1, c));
                    for i in 0..xhat.rows() {
                        for j in 0..c {
                            ggain[(0, j)] = ggain[(0, j)] + g[(i, j)] * xhat[(i, j)];
                        }
                    }
                }
                {
                    let gbias = slot(grads, *bias, (1, c));
                    for row in g.iter_rows() {
                        for (o, &v) in gbias.as_mut_slice().iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
                let gx = slot(grads, *x, xhat.shape());
                let mut dxhat = vec![T::zero(); c];
                for i in 0..xhat.rows() {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..c {
                        let d = g[(i, j)] * vg[(0, j)];
                        dxhat[j] = d;
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xhat[(i, j)];
                    }
                    mean_d = mean_d / n;
                    mean_dx = mean_dx / n;
                    for j in 0..c {
                        gx[(i, j)] = gx[(i, j)]
                            + inv_std[i] * (dxhat[j] - mean_d - xhat[(i, j)] * mean_dx);
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                let gx = slot(grads, *x, vx.shape());
                for ((o, &gv), &xv) in gx
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(vx.as_slice())
                {
                    *o = *o + gv * gelu_grad(xv);
                }
            }
            Op::ColSlice { x, start } => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                for i in 0..g.rows() {
                    for (o, &v) in gx.row_mut(i)[*start..*start + g.cols()]
                        .iter_mut()
                        .zip(g.row(i))
                    {
                        *o = *o + v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let shape = self.shape(p);
                    let gp = slot(grads, p, shape);
                    for i in 0..shape.0 {
                        for (o, &v) in gp
                            .row_mut(i)
                            .iter_mut()
                            .zip(&g.row(i)[off..off + shape.1])
                        {
                            *o = *o + v;
                        }
                    }
                    off += shape.1;
                }
            }
            Op::LogSoftmaxRows(x) => {
                let gx = slot(grads, *x, y.shape());
                for i in 0..y.rows() {
                    let gsum: T = g.row(i).iter().copied().sum();
                    for ((o, &gv), &yv) in gx.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = *o + gv - yv.exp() * gsum;
                    }
                }
            }
            Op::Trace(x) => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                for i in 0..shape.0 {
                    gx[(i, i)] = gx[(i, i)] + g.item();
                }
            }
            Op::Sum(x) => {
                let shape = self.shape(*x);
                let gx = slot(grads, *x, shape);
                let gv = g.item();
                for o in gx.as_mut_slice() {
                    *o = *o + gv;
                }
            }
        }
    }
}

fn slot<T: Real>(
    grads: &mut [Option<Matrix<T>>],
    v: Var,
    shape: (usize, usize),
) -> &mut Matrix<T> {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn group_sum_value<T: Real>(x: &Matrix<T>, groups: &Groups) -> Matrix<T> {
    let mut out = Matrix::zeros(groups.count(), x.cols());
    for i in 0..x.rows() {
        if let Some(k) = groups.group_of(i) {
            for (o, &v) in out.row_mut(k).iter_mut().zip(x.row(i)) {
                *o = *o + v;
            }
        }
    }
    out
}

fn gelu<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = T::lit(0.5);
    half * x * (T::one() + (k * (x + T::lit(GELU_C) * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x)
}

/// Names of the differentiable operations, for callers that dispatch by
/// name.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpName {
    Matmul,
    Add,
    Scale(f64),
    RowL2Normalize,
    MaskedSoftmax,
    MaskedRowMax,
    MaskedMean,
    LayerNorm,
    Gelu,
    CosineMatrix,
    Transpose,
}

impl OpName {
    fn label(self) -> &'static str {
        match self {
            OpName::Matmul => "matmul",
            OpName::Add => "add",
            OpName::Scale(_) => "scale",
            OpName::RowL2Normalize => "row-l2-normalize",
            OpName::MaskedSoftmax => "masked-softmax",
            OpName::MaskedRowMax => "masked-row-max",
            OpName::MaskedMean => "masked-mean",
            OpName::LayerNorm => "layer-norm",
            OpName::Gelu => "gelu",
            OpName::CosineMatrix => "cosine-matrix",
            OpName::Transpose => "transpose",
        }
    }

    fn arity(self) -> usize {
        match self {
            OpName::Matmul | OpName::Add | OpName::CosineMatrix => 2,
            OpName::LayerNorm => 3,
            _ => 1,
        }
    }
}

/// Applies a named operation. Mask-taking operations default to an
/// all-active mask over the columns (softmax, row-max) or rows (mean).
pub fn forward_op<T: Real>(
    tape: &mut Tape<T>,
    op: OpName,
    inputs: &[Var],
    mask: Option<&Mask>,
) -> Result<Var> {
    if inputs.len() != op.arity() {
        return Err(Error::shape(
            op.label(),
            format!("expected {} inputs, got {}", op.arity(), inputs.len()),
        ));
    }
    let x = inputs[0];
    let (rows, cols) = tape.shape(x);
    let col_mask = || mask.cloned().unwrap_or_else(|| Mask::all(cols));
    match op {
        OpName::Matmul => tape.matmul(x, inputs[1]),
        OpName::Add => tape.add(x, inputs[1]),
        OpName::Scale(c) => Ok(tape.scale(x, T::lit(c))),
        OpName::RowL2Normalize => Ok(tape.row_l2_normalize(x)),
        OpName::MaskedSoftmax => {
            let m = col_mask();
            check_mask_len(op, &m, cols)?;
            tape.masked_softmax(x, &m)
        }
        OpName::MaskedRowMax => {
            let m = col_mask();
            check_mask_len(op, &m, cols)?;
            tape.masked_row_max(x, &m)
        }
        OpName::MaskedMean => {
            let m = mask.cloned().unwrap_or_else(|| Mask::all(rows));
            check_mask_len(op, &m, rows)?;
            tape.masked_mean(x, &m)
        }
        OpName::LayerNorm => tape.layer_norm(x, inputs[1], inputs[2]),
        OpName::Gelu => Ok(tape.gelu(x)),
        OpName::CosineMatrix => tape.cosine_matrix(x, inputs[1]),
        OpName::Transpose => Ok(tape.transpose(x)),
    }
}

fn check_mask_len(op: OpName, mask: &Mask, expected: usize) -> Result<()> {
    if mask.len() != expected {
        return Err(Error::shape(
            op.label(),
            format!("mask length {} for extent {expected}", mask.len()),
        ));
    }
    if mask.active_count() == 0 {
        return Err(Error::EmptyMask { op: op.label() });
    }
    Ok(())
}
