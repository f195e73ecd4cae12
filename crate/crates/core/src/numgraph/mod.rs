//! Dense matrices and a reverse-mode tape over the fixed operation set the
//! retrieval head needs.

mod matrix;
mod tape;

pub use matrix::{EmbeddingMatrix, Groups, Mask, Matrix, Real};
pub use tape::{forward_op, Gradients, OpName, Tape, Var, NORM_EPS};
