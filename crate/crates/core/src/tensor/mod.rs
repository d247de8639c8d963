//! Dense 64-bit tensors and a small reverse-mode autodiff tape.
//!
//! The op set is exactly what the router network and its losses need:
//! matrix products, a handful of elementwise maps, row-wise softmax and
//! layer normalization, concatenation and row gathers. Every tensor on a
//! tape is rank 2 (`rows x cols`); vectors are `1 x n` or `n x 1` and a
//! scalar is `1 x 1`.
//!
//! All reductions run left to right over the flat row-major buffer, so a
//! forward or backward pass is bit-reproducible for identical inputs.

mod gradcheck;
mod tape;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Threshold above which softplus switches to `x + log(1 + exp(-x))`.
pub const SOFTPLUS_BRANCH: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}: mask selects no entries")]
    EmptySupport(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid tensor: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An owned dense tensor. Used for parameters and for values moved on and
/// off a [`Tape`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(default)]
    requires_grad: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Invalid(format!(
                "shape {shape:?} holds {numel} values but data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Replaces the stored gradient. The length must match the data.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(TensorError::Shape {
                op: "set_grad",
                lhs: self.shape.clone(),
                rhs: vec![grad.len()],
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// `(rows, cols)` view; rank-1 tensors are treated as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            [] => Ok((1, 1)),
            other => Err(TensorError::Invalid(format!(
                "expected rank <= 2, got shape {other:?}"
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Numerically stable `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > SOFTPLUS_BRANCH {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the entries where `mask` is true; masked-out entries are
/// exactly zero.
pub fn masked_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(TensorError::Shape {
            op: "masked_softmax",
            lhs: vec![logits.len()],
            rhs: vec![mask.len()],
        });
    }
    let mut out = vec![0.0; logits.len()];
    masked_softmax_into(logits, mask, &mut out)?;
    Ok(out)
}

pub(crate) fn masked_softmax_into(logits: &[f64], mask: &[bool], out: &mut [f64]) -> Result<()> {
    let mut max = f64::NEG_INFINITY;
    for (l, &m) in logits.iter().zip(mask) {
        if m && *l > max {
            max = *l;
        }
    }
    if max == f64::NEG_INFINITY {
        if mask.iter().any(|&m| m) {
            return Err(TensorError::NonFinite("masked_softmax logits".into()));
        }
        return Err(TensorError::EmptySupport("masked_softmax"));
    }
    let mut total = 0.0;
    for ((o, l), &m) in out.iter_mut().zip(logits).zip(mask) {
        if m {
            let e = (l - max).exp();
            *o = e;
            total += e;
        } else {
            *o = 0.0;
        }
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    Ok(())
}
