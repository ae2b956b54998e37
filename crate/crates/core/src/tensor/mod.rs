//! Dense row-major `f32` tensors and a single-use reverse-mode gradient tape.
//!
//! Values are stored in 32 bits; every reduction (matmul inner products,
//! means, softmax normalizers, log-sum-exp) accumulates in 64 bits so that
//! results are reproducible bit for bit and exact where the math is exact
//! (a product against an all-zero matrix is exactly zero).

mod kernels;
mod tape;

pub use kernels::{matmul, softmax_rows};
pub use tape::{Gradients, Tape, Var};

use crate::error::{GraftError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(GraftError::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(GraftError::Shape(format!(
                "shape {shape:?} holds {numel} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel]).expect("zero-sized extent")
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new([1], vec![value]).unwrap()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(GraftError::Shape(format!("expected a matrix, got shape {other:?}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients on allocates a zeroed buffer; turning them off drops it.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        self.grad = on.then(|| vec![0.0; self.data.len()]);
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        let Some(g) = self.grad.as_mut() else {
            return Err(GraftError::Contract(
                "cannot accumulate a gradient into a tensor that does not require grad".into(),
            ));
        };
        if g.len() != delta.len() {
            return Err(GraftError::Shape(format!(
                "gradient of length {} for tensor of {} values",
                delta.len(),
                g.len()
            )));
        }
        for (a, d) in g.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f32> {
        if self.shape != other.shape {
            return Err(GraftError::Shape(format!(
                "cannot compare {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Bitwise equality of values (distinguishes `0.0` from `-0.0`).
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
