//! Dense tensors with a tape-based reverse-mode autodiff engine.
//!
//! The op set is exactly what the Time CNN and Time CNN-GCN classifiers use:
//! time-axis convolution, batch normalization, leaky ReLU, time max pooling,
//! fully connected layers, sigmoid, dropout, binary cross-entropy, and the
//! graph propagation / node pooling ops. Everything is generic over
//! [`Scalar`] so that the same code runs in `f32` for training and in `f64`
//! for finite-difference gradient checks.

mod adam;
mod init;
mod ops;
mod tape;

pub use adam::{Adam, AdamConfig, AdamState};
pub use init::{xavier_bound, xavier_uniform};
pub use ops::{Mode, BN_EPS, BN_MOMENTUM, DEFAULT_LEAKY_SLOPE, KERNEL_WIDTH, PROB_CLAMP};
pub use tape::{BatchNormState, Gradients, Tape, Var};

use crate::error::{invalid, Result};
use std::fmt::Debug;

/// Floating point element type usable by the engine.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + Debug
    + Default
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    values: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return invalid(format!("tensor dimensions must be positive, got {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return invalid(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![F::zero(); n]).expect("zero-sized dimension")
    }

    pub fn full(shape: Vec<usize>, v: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape, vec![v; n]).expect("zero-sized dimension")
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<F> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[F]) {
        assert_eq!(g.len(), self.values.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Converts element type (used to run f32 models in f64 and back).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| G::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| G::from_f64(v.as_f64())).collect()),
        }
    }
}
