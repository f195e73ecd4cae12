use crate::numgraph::{Matrix, Real, Tape, Var};

/// Hands out parameter ids in registration order.
#[derive(Debug, Default)]
pub struct ParamIds(usize);

impl ParamIds {
    pub fn new() -> Self {
        Self(0)
    }

    pub fn take(&mut self) -> usize {
        self.0 += 1;
        self.0 - 1
    }

    pub fn issued(&self) -> usize {
        self.0
    }
}

/// A group of named trainable matrices. `tensors` and `tensors_mut` must
/// enumerate in the same order; that order defines the parameter ids used
/// on the tape.
pub trait ParamSet<T: Real> {
    fn tensors(&self) -> Vec<(String, &Matrix<T>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>>;

    /// Registers every tensor on the tape, returning the leaves in
    /// enumeration order.
    fn register(&self, tape: &mut Tape<T>, ids: &mut ParamIds) -> Vec<Var> {
        self.tensors()
            .into_iter()
            .map(|(_, m)| tape.param(ids.take(), m.clone()))
            .collect()
    }
}

pub(crate) fn prefixed<'a, T>(
    prefix: &str,
    items: Vec<(String, &'a Matrix<T>)>,
) -> Vec<(String, &'a Matrix<T>)> {
    items
        .into_iter()
        .map(|(n, m)| (format!("{prefix}.{n}"), m))
        .collect()
}
