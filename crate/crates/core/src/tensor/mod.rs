//! Dense `f32` tensors with a reverse-mode gradient tape.
//!
//! The tape ([`Graph`]) only knows the handful of ops the model zoo needs:
//! convolution, max-pooling, fully-connected layers, ReLU, dropout and a few
//! elementwise helpers. Losses plug in through [`CustomOp`].

mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use graph::{CustomOp, Graph, NodeId};
pub use optim::Sgd;
pub use params::{Gradients, ParamId, ParamStore};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

/// Row-major `f32` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(invalid("tensor", format!("zero extent in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(invalid(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.data.len() / self.shape[0];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn l2_norm(&self) -> f32 {
        self.data.iter().map(|v| v * v).sum::<f32>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| invalid("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    left: first.shape.clone(),
                    right: t.shape.clone(),
                });
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn stack_adds_leading_axis() {
        let a = Tensor::full(&[2, 2], 1.0);
        let b = Tensor::full(&[2, 2], 2.0);
        let s = Tensor::stack(&[a, b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.row(1), &[2.0; 4]);
    }
}
