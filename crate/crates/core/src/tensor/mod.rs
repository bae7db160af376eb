//! Dense tensors and a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major `f64` value. Parameters carry a gradient
//! buffer; constants never do. A [`Tape`] is built fresh for every forward
//! pass and records each operation as a node whose inputs precede it, so the
//! backward pass is a single reverse sweep.

mod gemm;
mod tape;

pub use tape::{EmptyRow, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    Length { shape: Vec<usize>, len: usize },
    #[error("softmax row {row} has every entry masked")]
    EmptySupport { row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for {op} with {limit} rows")]
    Index {
        op: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("dropout probability {0} outside [0, 1)")]
    DropoutRate(f64),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    trainable: bool,
}

impl Tensor {
    /// A value that never accumulates gradient.
    pub fn constant(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_len(shape, data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            trainable: false,
        })
    }

    /// A trainable parameter. Its gradient buffer is created lazily.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut t = Self::constant(shape, data)?;
        t.trainable = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
            trainable: false,
        }
    }

    pub fn zeros_param(shape: &[usize]) -> Self {
        let mut t = Self::zeros(shape);
        t.trainable = true;
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            trainable: false,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer. Constants ignore the call.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.trainable {
            return;
        }
        assert_eq!(delta.len(), self.data.len(), "gradient length");
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows when viewed as a matrix (leading dims flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Width of the last dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(TensorError::Length {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

/// Numerically stable softmax of a slice, restricted to `mask` when given.
///
/// Masked entries come out exactly zero and never enter the denominator.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    if !tape::softmax_into(x, mask, &mut out) {
        return Err(TensorError::EmptySupport { row: 0 });
    }
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
