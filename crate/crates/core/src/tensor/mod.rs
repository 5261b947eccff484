//! Dense f64 tensors, a reverse-mode autodiff graph, Adam, and checkpoints.
//!
//! Storage is row-major. Ops are recorded on a [`Graph`] that lives for one
//! forward/backward pass; parameters are borrowed into the graph so a single
//! immutable parameter set can be shared by many graphs on different threads.

mod adam;
mod checkpoint;
mod gemm;
mod graph;
mod params;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_tensors, save_tensors};
pub use graph::{pack_segments, Graph, Segment, Var};
pub use params::{GradBuf, Gradients, ParamKey, ParamSet};

use crate::error::{Error, Result};

/// A dense row-major tensor with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![g.len()],
            });
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub(crate) fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Rows of a 2-D tensor (or 1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Numerically stable softmax of a slice, written into `out`.
pub fn softmax_into(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable `log(sum(exp(x)))`.
pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
