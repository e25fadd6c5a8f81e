//! Dense row-major f64 tensors with reverse-mode autodiff.
//!
//! Values are immutable after construction (data is behind an [`std::sync::Arc`]),
//! so inference-mode tensors are freely shareable across threads. Gradient
//! recording goes through a thread-local [`GradientTape`]; a tensor carries an
//! optional handle into the tape that recorded it. Handles are tagged with the
//! tape generation, so a tensor that outlives its tape silently degrades to a
//! constant instead of corrupting a later tape.

pub mod ops;
pub mod serialize;
mod tape;

pub use tape::{GradientTape, Gradients, TapeRef};

use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid shape for {op}: {detail}")]
    InvalidShape { op: &'static str, detail: String },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss tensor was not recorded on this tape")]
    LossNotOnTape,
    #[error("a gradient tape is already active on this thread")]
    TapeAlreadyActive,
}

/// Dense row-major tensor. Shape dimensions are all >= 1 and
/// `product(shape) == data.len()` always holds.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<TapeRef>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let preview: Vec<f64> = self.data.iter().take(8).copied().collect();
        write!(
            f,
            "Tensor{:?}{}{:?}{}",
            self.shape,
            if self.node.is_some() { "*" } else { "" },
            preview,
            if self.data.len() > 8 { "…" } else { "" }
        )
    }
}

impl Tensor {
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                detail: format!("shape {:?} does not fit {} values", shape, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dim in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let numel: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d >= 1), "zero-sized dim in {shape:?}");
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::full(&[1], value)
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(&mut f).collect();
        Tensor::from_vec(data, shape).expect("from_fn shape")
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(rng: &mut crate::rng::Rng, shape: &[usize], std: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.normal() * std)
    }

    /// Uniform entries in [-bound, bound].
    pub fn rand_uniform(rng: &mut crate::rng::Rng, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| rng.range(-bound, bound))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Handle into the tape that recorded this tensor, if still current.
    pub fn tape_ref(&self) -> Option<TapeRef> {
        self.node
    }

    pub(crate) fn set_tape_ref(&mut self, r: Option<TapeRef>) {
        self.node = r;
    }

    /// Copy of this tensor that participates in no tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Mutable access to the underlying values for optimizer updates.
    /// Clears tape participation: an updated parameter is a fresh leaf.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }

    pub(crate) fn with_node(mut self, node: Option<TapeRef>) -> Tensor {
        self.node = node;
        self
    }

    /// Row-major strides for this shape.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_invariant() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.strides(), vec![3, 1]);
    }

    #[test]
    fn from_vec_rejects_mismatch() {
        assert!(Tensor::from_vec(vec![1.0; 5], &[2, 3]).is_err());
        assert!(Tensor::from_vec(vec![], &[0]).is_err());
    }

    #[test]
    fn detach_drops_tape_handle() {
        let tape = GradientTape::new().unwrap();
        let mut x = Tensor::ones(&[3]);
        tape.watch(&mut x);
        assert!(x.tape_ref().is_some());
        assert!(x.detach().tape_ref().is_none());
        drop(tape);
    }
}
