//! Dense row-major tensors with a reverse-mode tape.
//!
//! A [`Tensor`] owns its payload. Differentiable computations are recorded on
//! a [`Tape`] that is built fresh for every training step; parameters are
//! bound to it as leaves and their gradients are copied back after
//! [`Tape::backward`].

mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_with, to_f64, GradCheckReport};
pub use scalar::{DType, Float};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("backward: {0}")]
    Usage(String),
    #[error("non-finite value during {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(TensorError::Param {
                op: "tensor",
                msg: format!("extents must be positive, got {shape:?}"),
            });
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![T::zero(); n]).expect("zero extent")
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Self::new(shape, vec![value; n]).expect("zero extent")
    }

    pub fn scalar(value: T) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Param {
                op: "from_rows",
                msg: "ragged rows".into(),
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols().max(1)
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Converts to another element type.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// `c = a · b` on plain tensors, outside any tape.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((a[0], a[1], b[1]))
}

/// Row-wise softmax of `x / temperature` along the last axis.
pub fn softmax<T: Float>(x: &Tensor<T>, temperature: T) -> Result<Tensor<T>> {
    if !(temperature > T::zero()) {
        return Err(TensorError::Param {
            op: "softmax",
            msg: format!("temperature must be positive, got {temperature}"),
        });
    }
    let mut out = x.data.clone();
    kernels::softmax_rows(&mut out, x.cols(), T::one() / temperature);
    Tensor::new(x.shape.clone(), out)
}

/// Layer normalization over the last axis with affine gain and bias.
pub fn layer_norm<T: Float>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(TensorError::Shape {
            op: "layer_norm",
            lhs: x.shape.clone(),
            rhs: gain.shape.clone(),
        });
    }
    if !(eps > T::zero()) {
        return Err(TensorError::Param {
            op: "layer_norm",
            msg: "eps must be positive".into(),
        });
    }
    let (y, _, _) = kernels::layer_norm(x.data(), gain.data(), bias.data(), d, eps);
    Tensor::new(x.shape.clone(), y)
}
