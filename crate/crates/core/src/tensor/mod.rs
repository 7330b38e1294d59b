//! Dense `f64` tensors and a small define-then-run reverse-mode autodiff graph.
//!
//! Networks in this crate are composed from eight primitives only: matmul,
//! add, mul, affine, pointwise nonlinearity, sum/mean reduction, concatenate
//! and gather-by-index. Every graph is evaluated with [`Graph::forward_eval`],
//! which keeps the activations around so that [`Graph::backward`] can
//! propagate seed gradients back to the bound inputs that require them.

mod gradcheck;
mod graph;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Activation, Feed, Gradients, Graph, NodeId};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} holds {expected} values but {got} were given")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("node {node} ({op}): shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("input `{0}` is not bound")]
    MissingInput(String),
    #[error("no input named `{0}` in the graph")]
    UnknownInput(String),
    #[error("backward called before forward_eval")]
    BackwardBeforeForward,
    #[error("`{0}` is not an output of the graph")]
    NotAnOutput(String),
    #[error("seed gradient for `{name}` has shape {got:?}, output has {expected:?}")]
    SeedShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("gradient check needs exactly one scalar output, found {0}")]
    NonScalarOutput(String),
    #[error("node {node} (gather): index {index} out of range for table with {rows} rows")]
    IndexOutOfRange {
        node: usize,
        index: f64,
        rows: usize,
    },
}

/// Row-major dense array of `f64` with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.contains(&0) {
            return Err(TensorError::DataLength {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Panicking constructor for shapes known to be consistent.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        Self::new(shape.to_vec(), data).expect("tensor data does not match shape")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(&[1], vec![value])
    }

    /// A 1-D tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Self::from_vec(&[n], data)
    }

    /// Builds a `[rows.len(), cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(&[rows.len(), cols], data)
    }

    /// Marks this tensor as a trainable leaf.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Returns a copy that blocks gradient flow.
    pub fn detach(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: false,
            grad: None,
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

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        assert_eq!(g.len(), self.data.len(), "gradient length mismatch");
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Number of rows of a 2-D tensor (or length of a 1-D one).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(&self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::from_vec(&self.shape, data)
    }

    /// Stacks same-width matrices along the first axis.
    pub fn concat_rows(parts: &[&Tensor]) -> Self {
        let cols = parts[0].cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols(), cols, "concat_rows width mismatch");
            data.extend_from_slice(&p.data);
            rows += p.len() / cols;
        }
        Self::from_vec(&[rows, cols], data)
    }

    /// Rows `[start, end)` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self::from_vec(&[end - start, c], self.data[start * c..end * c].to_vec())
    }
}
