//! Dense f32 tensors, a reverse-mode tape, and the Adam optimizer.

pub mod io;
pub mod kernels;
pub mod optim;
pub mod tape;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use optim::{AdamConfig, OptimizerState, Schedule, StepOutcome};
pub use tape::{Gradients, RowMix, Tape, Var};

/// Row-major f32 tensor.
///
/// `grad` is filled by [`Gradients::write_into`] after a backward pass and read
/// by the optimizer; it always has the same dims as the tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = dims.iter().product();
        if dims.contains(&0) || numel != data.len() {
            return Err(Error::shape("Tensor::new", &dims, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Builds a tensor from data the caller already knows to be well-formed.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            dims,
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::from_parts(dims.to_vec(), vec![0.0; dims.iter().product()])
    }

    pub fn full(dims: &[usize], value: f32) -> Self {
        Self::from_parts(dims.to_vec(), vec![value; dims.iter().product()])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f32, rng: &mut R) -> Self {
        let normal = Normal::new(0.0f32, std.max(f32::MIN_POSITIVE)).expect("valid std");
        let data = (0..dims.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        Self::from_parts(dims.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], low: f32, high: f32, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| rng.random_range(low..high))
            .collect();
        Self::from_parts(dims.to_vec(), data)
    }

    /// Marks the tensor as a trainable parameter.
    pub fn into_param(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Width of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().expect("tensors have rank >= 1")
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.dims, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() || dims.contains(&0) {
            return Err(Error::shape("reshape", &self.dims, dims));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `r` of the `[rows, last_dim]` view.
    pub fn row(&self, r: usize) -> &[f32] {
        let w = self.last_dim();
        &self.data[r * w..(r + 1) * w]
    }
}
