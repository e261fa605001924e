//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! [`Tensor`] is a plain owned value (parameters, constants, data). Forward
//! passes are recorded on a [`Tape`] through [`Var`] handles; after
//! [`Tape::backward`] the resulting [`Gradients`] are folded back into the
//! parameter tensors with [`Gradients::accumulate_into`].

mod gradcheck;
pub(crate) mod kernels;
mod tape;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use gradcheck::{
    finite_difference_check, finite_difference_check_state, GradCheckConfig, GradCheckReport, ParamCheck,
};
pub use tape::{BinaryKind, Gradients, Tape, UnaryKind, Var};

static NEXT_KEY: AtomicU64 = AtomicU64::new(1);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

/// Initial contents for [`Tensor::new`].
#[derive(Debug, Clone, Copy)]
pub enum Fill<'a> {
    Scalar(f64),
    Values(&'a [f64]),
}

/// Row-major n-dimensional array of `f64`.
///
/// Every tensor carries a process-unique key used by the tape to recognise
/// repeated uses of the same parameter. Cloning yields a new key.
#[derive(Debug)]
pub struct Tensor {
    key: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Clone for Tensor {
    fn clone(&self) -> Self {
        Tensor {
            key: fresh_key(),
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data == other.data
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("zero-size dimension in {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill<'_>, requires_grad: bool) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = match fill {
            Fill::Scalar(v) => vec![v; numel],
            Fill::Values(values) => {
                if values.len() != numel {
                    return Err(Error::shape(format!(
                        "shape {shape:?} holds {numel} values, got {}",
                        values.len()
                    )));
                }
                values.to_vec()
            }
        };
        Ok(Tensor {
            key: fresh_key(),
            shape: shape.to_vec(),
            data,
            requires_grad,
            grad: None,
        })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if data.len() != numel {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            key: fresh_key(),
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Tensor::new(shape, Fill::Scalar(0.0), false)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            key: fresh_key(),
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Gaussian initialisation with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Self> {
        let numel = check_shape(shape)?;
        let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(format!("bad init std {std}: {e}")))?;
        let data = (0..numel).map(|_| normal.sample(rng)).collect();
        Tensor::from_vec(shape, data)
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(shape, data)
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient. Ignored for tensors that do not
    /// require gradients.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != self.data.len() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
