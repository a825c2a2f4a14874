//! Dense tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain row-major `f32` buffer with shape metadata and an
//! optional gradient. Differentiable computation happens on a [`Tape`]: leaves
//! are registered, ops are recorded in forward order, and [`Tape::backward`]
//! replays them in reverse. Tensors with no gradient state are immutable value
//! types and can be shared freely across threads; a tape lives on one thread
//! for one forward/backward cycle.

mod fdcheck;
mod optim;
mod tape;

pub use fdcheck::finite_diff_check;
pub use optim::{Adam, AdamConfig};
pub use tape::{Gradients, Tape, Var};

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    LengthMismatch {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("degenerate vector (zero norm) in {op}")]
    DegenerateVector { op: &'static str },
    #[error("{op}: empty last axis")]
    EmptyAxis { op: &'static str },
    #[error("invalid parameter in {op}: {msg}")]
    Parameter { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },
    #[error("index {index} out of range for extent {extent} in {op}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

/// Identity tying a tensor to its tape leaf registration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(u64);

/// Dense rank-N array of `f32` in row-major order.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    id: TensorId,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        // A clone is a distinct tensor: it gets its own tape identity.
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            id: fresh_id(),
        }
    }
}

fn fresh_id() -> TensorId {
    TensorId(NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed))
}

pub(crate) fn check_finite(data: &[f32], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                op: "Tensor::new",
                len: data.len(),
                shape,
            });
        }
        check_finite(&data, "Tensor::new")?;
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        })
    }

    /// A trainable tensor: gradients accumulate into it after backward.
    pub fn param(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        let mut t = Tensor::new(data, shape)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
            id: fresh_id(),
        }
    }

    pub fn scalar(v: f32) -> Result<Self> {
        Tensor::new(vec![v], vec![])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Toggle gradient tracking (used to freeze shadow copies of towers).
    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        if !flag {
            self.grad = None;
        }
    }

    pub fn id(&self) -> TensorId {
        self.id
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Accumulate a gradient contribution (sums with any existing gradient).
    pub fn add_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += v;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Ensure a gradient buffer exists (zeros if nothing flowed here).
    pub fn ensure_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Squared L2 norm of the gradient, 0 if absent.
    pub fn grad_norm_sq(&self) -> f64 {
        self.grad
            .as_deref()
            .map(|g| g.iter().map(|v| (*v as f64) * (*v as f64)).sum())
            .unwrap_or(0.0)
    }
}

/// Cosine similarity of two equal-length vectors.
///
/// Zero-norm inputs are an error, never a silent 0.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_similarity",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        dot += (*x as f64) * (*y as f64);
        na += (*x as f64) * (*x as f64);
        nb += (*y as f64) * (*y as f64);
    }
    if na == 0.0 || nb == 0.0 {
        return Err(TensorError::DegenerateVector {
            op: "cosine_similarity",
        });
    }
    Ok((dot / (na.sqrt() * nb.sqrt())) as f32)
}

/// Stable row-wise temperature softmax over the last axis of a flat buffer.
///
/// Shared kernel for the tape op and standalone uses. Accumulates in f64 and
/// subtracts the row max before exponentiating.
pub(crate) fn softmax_rows_kernel(data: &[f32], cols: usize, tau: f64, out: &mut [f32]) {
    debug_assert!(cols > 0 && data.len() % cols == 0);
    for (row, orow) in data.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut sum = 0.0f64;
        let mut exps = vec![0.0f64; cols];
        for (j, v) in row.iter().enumerate() {
            let e = ((*v as f64 - max) / tau).exp();
            exps[j] = e;
            sum += e;
        }
        for (o, e) in orow.iter_mut().zip(&exps) {
            *o = (e / sum) as f32;
        }
    }
}

/// Temperature softmax over the last axis, as a standalone operation.
pub fn softmax_with_temperature(x: &Tensor, tau: f32) -> Result<Tensor> {
    if tau <= 0.0 {
        return Err(TensorError::Parameter {
            op: "softmax_with_temperature",
            msg: format!("tau must be positive, got {tau}"),
        });
    }
    let cols = *x.shape().last().ok_or(TensorError::EmptyAxis {
        op: "softmax_with_temperature",
    })?;
    if cols == 0 {
        return Err(TensorError::EmptyAxis {
            op: "softmax_with_temperature",
        });
    }
    let mut out = vec![0.0f32; x.numel()];
    softmax_rows_kernel(x.data(), cols, tau as f64, &mut out);
    Tensor::new(out, x.shape().to_vec())
}
