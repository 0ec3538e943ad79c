//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a plain value: row-major contiguous f64 storage plus a
//! shape. Differentiable computation happens on a [`Tape`](tape::Tape),
//! which records operations and replays them backward to populate
//! gradients. Everything is double precision; views are realized by copy.

pub mod checkpoint;
pub mod tape;

pub use tape::{Tape, Value};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Product of dimension sizes.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense multi-dimensional array of f64, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    /// Populated for leaves after a backward pass; same length as `data`.
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor contains {bad}")));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; numel(shape)],
            shape: shape.to_vec(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v]).expect("finite scalar")
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)].
    pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Self {
        Tensor::init_uniform_bound(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
    }

    /// Uniform init in [-bound, +bound].
    pub fn init_uniform_bound(shape: &[usize], bound: f64, rng: &mut Rng) -> Self {
        let data = (0..numel(shape)).map(|_| rng.uniform(-bound, bound)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
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

    /// Element by multi-dimensional index; debug-checked.
    pub fn at(&self, idx: &[usize]) -> f64 {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            debug_assert!(i < self.shape[d]);
            flat = flat * self.shape[d] + i;
        }
        self.data[flat]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// NumPy-style broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return Err(Error::Shape(format!("cannot broadcast {a:?} with {b:?}")));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

/// Left-pad a shape with 1s to the given rank.
pub(crate) fn pad_rank(shape: &[usize], ndim: usize) -> Vec<usize> {
    let mut padded = vec![1usize; ndim];
    padded[ndim - shape.len()..].copy_from_slice(shape);
    padded
}

/// Row-major strides, with stride 0 on broadcast (size-1) axes relative to `out_shape`.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let padded = pad_rank(shape, out_shape.len());
    let mut strides = vec![0usize; out_shape.len()];
    let mut acc = 1usize;
    for d in (0..padded.len()).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    strides
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast axes. Inverse of broadcasting in the backward pass.
pub(crate) fn reduce_to_shape(grad: &[f64], grad_shape: &[usize], target_shape: &[usize]) -> Vec<f64> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let ndim = grad_shape.len();
    let padded = pad_rank(target_shape, ndim);
    let mut out = vec![0.0; numel(target_shape)];
    let mut coords = vec![0usize; ndim];
    let mut tgt_strides = vec![0usize; ndim];
    let mut acc = 1usize;
    for d in (0..ndim).rev() {
        tgt_strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    for (flat, &g) in grad.iter().enumerate() {
        let mut rem = flat;
        for d in (0..ndim).rev() {
            coords[d] = rem % grad_shape[d];
            rem /= grad_shape[d];
        }
        let mut tflat = 0usize;
        for d in 0..ndim {
            if tgt_strides[d] != 0 {
                tflat += coords[d] * tgt_strides[d];
            }
        }
        out[tflat] += g;
    }
    out
}

/// Ordered, uniquely named collection of parameter tensors.
///
/// Models own their weights here; each training step binds the store into a
/// fresh tape, and gradients are copied back after `backward`.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        assert!(
            self.index_of(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.entries.push((name.to_string(), tensor.with_grad()));
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    /// Register every parameter as a gradient-tracked leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let values = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t))
            .collect::<Vec<_>>();
        BoundParams {
            names: self.entries.iter().map(|(n, _)| n.clone()).collect(),
            values,
        }
    }

    /// Copy gradients from a backward-completed tape into each tensor's
    /// `grad` field. Parameters that did not reach the loss get zeros.
    pub fn absorb_grads(&mut self, tape: &Tape, bound: &BoundParams) {
        for (i, (_, t)) in self.entries.iter_mut().enumerate() {
            let g = tape
                .grad(bound.values[i])
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()]);
            t.grad = Some(g);
        }
    }
}

/// Parameter leaves registered on a specific tape, in store order.
pub struct BoundParams {
    names: Vec<String>,
    values: Vec<Value>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Value {
        match self.names.iter().position(|n| n == name) {
            Some(i) => self.values[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }
}
