//! Dense row-major `f32` tensors and a single-use reverse-mode
//! differentiation graph.
//!
//! [`Tensor`] is a plain value: it never carries graph state and can be
//! moved freely between threads. Differentiable computation happens on a
//! [`Graph`], which records every operation applied to its [`Var`] handles
//! and supports exactly one [`Graph::backward`] pass.

mod gemm;
mod graph;
mod ops;

pub use graph::{Gradients, Graph, MaskedPool, Var, POOL_EPSILON};
pub use ops::BinaryKind;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("invalid target value {value} at index {index}; expected 0 or 1")]
    InvalidTarget { index: usize, value: f32 },
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        TensorError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// An n-dimensional array of `f32` stored in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::shape(
                "Tensor::new",
                format!("dimensions must be positive, got {shape:?}"),
            ));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n]).expect("positive dimensions")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(TensorError::shape(
                "dims3",
                format!("expected a [C,H,W] tensor, got {:?}", self.shape),
            )),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Equality of shapes and the exact bit patterns of every element.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }
}

/// Nearest-neighbour resampling of a `[C,H,W]` tensor (index `floor(dst * in / out)`).
/// Binary inputs stay binary.
pub fn resize_nearest(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::shape("resize_nearest", "output size must be positive"));
    }
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for oy in 0..out_h {
            let sy = (oy * h / out_h).min(h - 1);
            for ox in 0..out_w {
                let sx = (ox * w / out_w).min(w - 1);
                out.push(x.data[ch * h * w + sy * w + sx]);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Per-pixel softmax over the channel axis of a `[C,H,W]` tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (c, h, w) = logits.dims3()?;
    let plane = h * w;
    let src = logits.data();
    let mut out = vec![0.0f32; src.len()];
    for p in 0..plane {
        let max = (0..c).map(|k| src[k * plane + p]).fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f32;
        for k in 0..c {
            let e = (src[k * plane + p] - max).exp();
            out[k * plane + p] = e;
            denom += e;
        }
        for k in 0..c {
            out[k * plane + p] /= denom;
        }
    }
    Tensor::new(vec![c, h, w], out)
}
