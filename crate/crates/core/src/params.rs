//! Parameter-set plumbing shared by every trainable model: named tensor
//! views, gradient containers and global-norm helpers.

use serde::{Deserialize, Serialize};

/// The four gated pre-activations of an LSTM cell, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gate {
    /// Memory input `g`, squashed with tanh.
    Candidate,
    Input,
    Forget,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Candidate, Gate::Input, Gate::Forget, Gate::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn suffix(self) -> &'static str {
        match self {
            Gate::Candidate => "g",
            Gate::Input => "i",
            Gate::Forget => "f",
            Gate::Output => "o",
        }
    }
}

/// Read-only view of one parameter array.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

/// A collection of named parameter arrays with a fixed visiting order.
///
/// `tensors` and `tensors_mut` must enumerate the same arrays in the same
/// order; checkpoints, optimizers and the gradient checker rely on it.
pub trait ParamSet: Clone + Send + Sync {
    fn tensors(&self) -> Vec<TensorRef<'_>>;

    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Shapes (name, rows, cols) in visiting order.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        self.tensors()
            .into_iter()
            .map(|t| (t.name, t.rows, t.cols))
            .collect()
    }

    /// All entries concatenated in visiting order.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t.data);
        }
        out
    }
}

/// Gradients for a parameter set `P`, stored with the same structure so
/// shapes are congruent by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSet<P> {
    inner: P,
}

impl<P: ParamSet> GradSet<P> {
    pub fn zeros_for(params: &P) -> Self {
        GradSet {
            inner: params.zeros_like(),
        }
    }

    pub fn from_inner(inner: P) -> Self {
        GradSet { inner }
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn inner_mut(&mut self) -> &mut P {
        &mut self.inner
    }

    pub fn into_inner(self) -> P {
        self.inner
    }

    pub fn is_congruent(&self, params: &P) -> bool {
        self.inner.layout() == params.layout()
    }

    pub fn global_norm(&self) -> f64 {
        self.inner
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.inner.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Element-wise `self += other`. Panics on layout mismatch.
    pub fn add_assign(&mut self, other: &GradSet<P>) {
        let src = other.inner.tensors();
        let dst = self.inner.tensors_mut();
        assert_eq!(src.len(), dst.len(), "gradient sets differ in tensor count");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.len(), s.data.len(), "gradient tensor {} differs in size", s.name);
            for (a, b) in d.iter_mut().zip(s.data) {
                *a += b;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.inner.tensors().iter().all(|t| t.data.iter().all(|&v| v == 0.0))
    }
}
