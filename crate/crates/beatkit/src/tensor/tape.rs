//! Computation tape: records operations, replays them backward.
//!
//! A [`Tape`] owns every intermediate of one forward pass. Operations append
//! nodes in topological order; [`Tape::backward`] walks the record in
//! reverse, populating gradients for every node that can reach a tracked
//! leaf, then clears the operation log. One backward per tape.
//!
//! Every public operation validates its output for NaN/Inf, with one
//! deliberate exception: [`Tape::masked_fill`] may write `-inf`, the masking
//! sentinel consumed by [`Tape::softmax_lastdim`].

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{broadcast_shapes, broadcast_strides, numel, pad_rank, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Value(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    /// Elementwise scale; the additive shift has zero gradient.
    Affine(Value, f64),
    Matmul {
        a: Value,
        b: Value,
        transpose_b: bool,
    },
    Linear {
        x: Value,
        w: Value,
        b: Value,
    },
    SoftmaxLast(Value),
    LayerNorm {
        x: Value,
        gain: Value,
        bias: Value,
        /// Cached per-row (mean, inv_std) from the forward pass.
        stats: Vec<(f64, f64)>,
    },
    Relu(Value),
    Sigmoid(Value),
    Ln(Value),
    Clamp(Value, f64, f64),
    SumAxis(Value, usize),
    MeanAxis(Value, usize),
    SumAll(Value),
    MeanAll(Value),
    Reshape(Value),
    PadAxis {
        x: Value,
        axis: usize,
        left: usize,
    },
    WindowedGather {
        x: Value,
        m: usize,
        n: usize,
        r: usize,
    },
    MaskedFill {
        x: Value,
        mask: Vec<bool>,
    },
    ConcatLast(Vec<Value>),
    IndexAxis {
        x: Value,
        axis: usize,
        index: usize,
    },
    StackAxis {
        xs: Vec<Value>,
        axis: usize,
    },
    Conv2dSame {
        x: Value,
        w: Value,
        b: Value,
    },
    MaxPoolFreq {
        x: Value,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Value,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward pass and differentiates it once.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    finished: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf; gradient tracking follows the tensor.
    pub fn leaf(&mut self, t: &Tensor) -> Value {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad,
            Op::Leaf,
        )
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor) -> Value {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Value) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn to_tensor(&self, v: Value) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node holds a valid tensor")
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Value) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Value {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Value(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<Value> {
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "operation produced {bad} (shape {shape:?})"
            )));
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    fn rg(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn binary(
        &mut self,
        a: Value,
        b: Value,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Value> {
        let out_shape = broadcast_shapes(&self.nodes[a.0].shape, &self.nodes[b.0].shape)?;
        let total = numel(&out_shape);
        let sa = broadcast_strides(&self.nodes[a.0].shape, &out_shape);
        let sb = broadcast_strides(&self.nodes[b.0].shape, &out_shape);
        let (ad, bd) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let ndim = out_shape.len();
        let mut out = vec![0.0; total];
        let mut coords = vec![0usize; ndim];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for d in (0..ndim).rev() {
                coords[d] = rem % out_shape[d];
                rem /= out_shape[d];
            }
            let mut ia = 0;
            let mut ib = 0;
            for d in 0..ndim {
                ia += coords[d] * sa[d];
                ib += coords[d] * sb[d];
            }
            *slot = f(ad[ia], bd[ib]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(out_shape, out, rg, op)
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Value, scale: f64, shift: f64) -> Result<Value> {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|&v| scale * v + shift).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked(shape, data, rg, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Value, scale: f64) -> Result<Value> {
        self.affine(x, scale, 0.0)
    }

    fn unary(&mut self, x: Value, f: impl Fn(f64) -> f64, op: Op) -> Result<Value> {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|&v| f(v)).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked(shape, data, rg, op)
    }

    pub fn relu(&mut self, x: Value) -> Result<Value> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Value) -> Result<Value> {
        self.unary(x, |v| 1.0 / (1.0 + (-v).exp()), Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: Value) -> Result<Value> {
        self.unary(x, f64::ln, Op::Ln(x))
    }

    pub fn clamp(&mut self, x: Value, lo: f64, hi: f64) -> Result<Value> {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Inverted dropout: keeps with probability `1-rate`, scaling by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Value, rate: f64, rng: &mut Rng) -> Result<Value> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        let n = &self.nodes[x.0];
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..n.data.len())
            .map(|_| if rng.next_f64() < rate { 0.0 } else { keep })
            .collect();
        let data = n.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked(shape, data, rg, Op::Dropout { x, mask })
    }

    // ── matrix products ─────────────────────────────────────────────

    /// Batched matrix product with broadcastable leading dimensions.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two dimensions; avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: Value, b: Value) -> Result<Value> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Value, b: Value, transpose_b: bool) -> Result<Value> {
        let (ashape, bshape) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if ashape.len() < 2 || bshape.len() < 2 {
            return Err(Error::Shape(format!(
                "matmul needs rank >= 2, got {ashape:?} and {bshape:?}"
            )));
        }
        let (p, q) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let (bk, br) = if transpose_b {
            (bshape[bshape.len() - 1], bshape[bshape.len() - 2])
        } else {
            (bshape[bshape.len() - 2], bshape[bshape.len() - 1])
        };
        if q != bk {
            return Err(Error::Shape(format!(
                "matmul inner dimensions disagree: {ashape:?} x {bshape:?} (transpose_b={transpose_b})"
            )));
        }
        let batch_a = &ashape[..ashape.len() - 2];
        let batch_b = &bshape[..bshape.len() - 2];
        let batch = broadcast_shapes(batch_a, batch_b)?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[p, br]);

        let n_batch = numel(&batch);
        let sa = batch_offsets(batch_a, &batch, p * q);
        let sb = batch_offsets(batch_b, &batch, bk * br);
        let mut out = vec![0.0; n_batch * p * br];
        for i in 0..n_batch {
            mm2d(
                &self.nodes[a.0].data[sa[i]..sa[i] + p * q],
                &self.nodes[b.0].data[sb[i]..sb[i] + bk * br],
                p,
                q,
                br,
                false,
                transpose_b,
                &mut out[i * p * br..(i + 1) * p * br],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(out_shape, out, rg, Op::Matmul { a, b, transpose_b })
    }

    /// `x @ w + b` where `x` is `[..., d_in]`, `w` is `[d_in, d_out]`, `b` is `[d_out]`.
    pub fn linear(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let xs = &self.nodes[x.0].shape;
        let ws = &self.nodes[w.0].shape;
        let bs = &self.nodes[b.0].shape;
        if ws.len() != 2 || bs.len() != 1 || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "linear expects w [d_in,d_out] and b [d_out], got {ws:?} and {bs:?}"
            )));
        }
        let d_in = *xs.last().ok_or_else(|| Error::Shape("linear on scalar".into()))?;
        if d_in != ws[0] {
            return Err(Error::Shape(format!(
                "linear input width {d_in} != weight rows {}",
                ws[0]
            )));
        }
        let d_out = ws[1];
        let rows = numel(xs) / d_in;
        let mut out = vec![0.0; rows * d_out];
        for (row, chunk) in out.chunks_mut(d_out).enumerate() {
            chunk.copy_from_slice(&self.nodes[b.0].data);
            let _ = row;
        }
        mm2d(
            &self.nodes[x.0].data,
            &self.nodes[w.0].data,
            rows,
            d_in,
            d_out,
            false,
            false,
            &mut out,
        );
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = d_out;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push_checked(out_shape, out, rg, Op::Linear { x, w, b })
    }

    // ── normalization and softmax ───────────────────────────────────

    /// Stable softmax over the last dimension. `-inf` entries become exact
    /// zeros; a slice of only `-inf` is a degenerate-slice error.
    pub fn softmax_lastdim(&mut self, x: Value) -> Result<Value> {
        let n = &self.nodes[x.0];
        let last = *n
            .shape
            .last()
            .ok_or_else(|| Error::Shape("softmax on scalar".into()))?;
        let mut out = vec![0.0; n.data.len()];
        for (row_idx, (row_in, row_out)) in n
            .data
            .chunks(last)
            .zip(out.chunks_mut(last))
            .enumerate()
        {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateSlice(format!(
                    "softmax row {row_idx} is fully masked"
                )));
            }
            if max.is_nan() {
                return Err(Error::NonFinite("softmax input contains NaN".into()));
            }
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = if v == f64::NEG_INFINITY {
                    0.0
                } else {
                    (v - max).exp()
                };
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        self.push_checked(shape, out, rg, Op::SoftmaxLast(x))
    }

    /// Layer normalization over the last dimension with learned gain/bias.
    pub fn layer_norm(&mut self, x: Value, gain: Value, bias: Value, eps: f64) -> Result<Value> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let d = *self.nodes[x.0]
            .shape
            .last()
            .ok_or_else(|| Error::Shape("layer_norm on scalar".into()))?;
        if self.nodes[gain.0].shape != [d] || self.nodes[bias.0].shape != [d] {
            return Err(Error::Shape(format!(
                "layer_norm gain/bias must be [{d}], got {:?} and {:?}",
                self.nodes[gain.0].shape, self.nodes[bias.0].shape
            )));
        }
        let xd = &self.nodes[x.0].data;
        let (gd, bd) = (&self.nodes[gain.0].data, &self.nodes[bias.0].data);
        let mut out = vec![0.0; xd.len()];
        let mut stats = Vec::with_capacity(xd.len() / d);
        for (row_in, row_out) in xd.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row_in.iter().sum::<f64>() / d as f64;
            let var = row_in.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            stats.push((mean, inv_std));
            for j in 0..d {
                row_out[j] = (row_in[j] - mean) * inv_std * gd[j] + bd[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push_checked(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        )
    }

    // ── reductions and reshaping ────────────────────────────────────

    fn reduce_axis(&mut self, x: Value, axis: usize, mean: bool) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xd = &self.nodes[x.0].data;
        let denom = if mean { len as f64 } else { 1.0 };
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        if mean {
            for v in out.iter_mut() {
                *v /= denom;
            }
        }
        let rg = self.rg(x);
        let op = if mean {
            Op::MeanAxis(x, axis)
        } else {
            Op::SumAxis(x, axis)
        };
        self.push_checked(out_shape, out, rg, op)
    }

    pub fn sum_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Value, axis: usize) -> Result<Value> {
        self.reduce_axis(x, axis, true)
    }

    pub fn sum_all(&mut self, x: Value) -> Result<Value> {
        let s = self.nodes[x.0].data.iter().sum();
        let rg = self.rg(x);
        self.push_checked(vec![1], vec![s], rg, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Value) -> Result<Value> {
        let n = self.nodes[x.0].data.len() as f64;
        let s = self.nodes[x.0].data.iter().sum::<f64>() / n;
        let rg = self.rg(x);
        self.push_checked(vec![1], vec![s], rg, Op::MeanAll(x))
    }

    pub fn reshape(&mut self, x: Value, shape: Vec<usize>) -> Result<Value> {
        if numel(&shape) != self.nodes[x.0].data.len() {
            return Err(Error::Shape(format!(
                "reshape {:?} -> {shape:?} changes element count",
                self.nodes[x.0].shape
            )));
        }
        let data = self.nodes[x.0].data.clone();
        let rg = self.rg(x);
        Ok(self.push(shape, data, rg, Op::Reshape(x)))
    }

    /// Grow `axis` by `left`/`right` cells filled with `value`.
    pub fn pad_axis(
        &mut self,
        x: Value,
        axis: usize,
        left: usize,
        right: usize,
        value: f64,
    ) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Shape(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("pad value {value}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let new_len = len + left + right;
        let mut out_shape = shape;
        out_shape[axis] = new_len;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![value; outer * new_len * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = (o * len + l) * inner;
                let dst = (o * new_len + left + l) * inner;
                out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
            }
        }
        let rg = self.rg(x);
        self.push_checked(
            out_shape,
            out,
            rg,
            Op::PadAxis { x, axis, left },
        )
    }

    /// Windowed gather for dilated attention: from `x` of shape `[T, d]`,
    /// produce `[T, m+n+1, d]` where slot `k` of row `i` holds row
    /// `i + r*(k - m)` of `x`, or zeros when that row is out of range.
    ///
    /// Realized as pad + shifted copies + stack; memory is O(T * l_win * d)
    /// and a `T x T` buffer is never formed. Out-of-range slots are padding;
    /// callers mask them via [`window_mask`] before softmax.
    pub fn windowed_gather(&mut self, x: Value, m: usize, n: usize, r: usize) -> Result<Value> {
        if r == 0 {
            return Err(Error::Config("dilation rate must be >= 1".into()));
        }
        let shape = self.nodes[x.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::Shape(format!(
                "windowed_gather expects [T, d], got {shape:?}"
            )));
        }
        let (t, d) = (shape[0], shape[1]);
        let l_win = m + n + 1;
        let xd = &self.nodes[x.0].data;
        // pad m*r rows on the left, n*r on the right
        let padded_rows = t + (m + n) * r;
        let mut padded = vec![0.0; padded_rows * d];
        padded[m * r * d..m * r * d + t * d].copy_from_slice(xd);
        // l_win shifted copies stacked on a new middle axis, truncated to T rows
        let mut out = vec![0.0; t * l_win * d];
        for k in 0..l_win {
            for i in 0..t {
                let src = (i + k * r) * d;
                let dst = (i * l_win + k) * d;
                out[dst..dst + d].copy_from_slice(&padded[src..src + d]);
            }
        }
        let rg = self.rg(x);
        self.push_checked(vec![t, l_win, d], out, rg, Op::WindowedGather { x, m, n, r })
    }

    /// Replace entries where `mask` is false with `value` (typically `-inf`).
    pub fn masked_fill(&mut self, x: Value, mask: &[bool], value: f64) -> Result<Value> {
        let node = &self.nodes[x.0];
        if mask.len() != node.data.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, tensor has {}",
                mask.len(),
                node.data.len()
            )));
        }
        if value.is_nan() || value == f64::INFINITY {
            return Err(Error::NonFinite(format!("masked_fill value {value}")));
        }
        let data = node
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &keep)| if keep { v } else { value })
            .collect();
        let (shape, rg) = (node.shape.clone(), node.requires_grad);
        // the one op allowed to emit -inf
        Ok(self.push(
            shape,
            data,
            rg,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Concatenate along the last dimension; all leading dims must match.
    pub fn concat_last(&mut self, xs: &[Value]) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::Contract("concat_last of nothing".into()));
        }
        let lead = self.nodes[xs[0].0].shape[..self.nodes[xs[0].0].shape.len() - 1].to_vec();
        let mut widths = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = &self.nodes[v.0].shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::Shape("concat_last leading dims differ".into()));
            }
            widths.push(*s.last().unwrap());
        }
        let total_w: usize = widths.iter().sum();
        let rows = numel(&lead);
        let mut out = vec![0.0; rows * total_w];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = &self.nodes[v.0].data;
            for row in 0..rows {
                out[row * total_w + offset..row * total_w + offset + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            offset += w;
        }
        let mut out_shape = lead;
        out_shape.push(total_w);
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push_checked(out_shape, out, rg, Op::ConcatLast(xs.to_vec()))
    }

    /// Select index `index` along `axis`, dropping that axis.
    pub fn index_axis(&mut self, x: Value, axis: usize, index: usize) -> Result<Value> {
        let shape = self.nodes[x.0].shape.clone();
        if axis >= shape.len() || index >= shape[axis] {
            return Err(Error::Shape(format!(
                "index {index} on axis {axis} invalid for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let src = (o * len + index) * inner;
            out[o * inner..(o + 1) * inner].copy_from_slice(&xd[src..src + inner]);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(x);
        self.push_checked(out_shape, out, rg, Op::IndexAxis { x, axis, index })
    }

    /// Stack equal-shaped values along a new axis.
    pub fn stack_axis(&mut self, xs: &[Value], axis: usize) -> Result<Value> {
        if xs.is_empty() {
            return Err(Error::Contract("stack_axis of nothing".into()));
        }
        let base = self.nodes[xs[0].0].shape.clone();
        if axis > base.len() {
            return Err(Error::Shape(format!(
                "stack axis {axis} out of range for {base:?}"
            )));
        }
        for &v in xs {
            if self.nodes[v.0].shape != base {
                return Err(Error::Shape("stack_axis shapes differ".into()));
            }
        }
        let mut out_shape = base.clone();
        out_shape.insert(axis, xs.len());
        let (outer, len, inner) = split_axis(&out_shape, axis);
        debug_assert_eq!(len, xs.len());
        let mut out = vec![0.0; outer * len * inner];
        for (j, &v) in xs.iter().enumerate() {
            let src = &self.nodes[v.0].data;
            for o in 0..outer {
                let dst = (o * len + j) * inner;
                out[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        self.push_checked(
            out_shape,
            out,
            rg,
            Op::StackAxis {
                xs: xs.to_vec(),
                axis,
            },
        )
    }

    // ── convolutional front-end ─────────────────────────────────────

    /// 2D convolution with 'same' zero padding. `x` is `[T, F, c_in]`,
    /// `w` is `[kh, kw, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d_same(&mut self, x: Value, w: Value, b: Value) -> Result<Value> {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        if xs.len() != 3 || ws.len() != 4 || xs[2] != ws[2] {
            return Err(Error::Shape(format!(
                "conv2d_same expects x [T,F,c_in], w [kh,kw,c_in,c_out]; got {xs:?}, {ws:?}"
            )));
        }
        let (t, f, c_in) = (xs[0], xs[1], xs[2]);
        let (kh, kw, c_out) = (ws[0], ws[1], ws[3]);
        if self.nodes[b.0].shape != [c_out] {
            return Err(Error::Shape("conv2d_same bias must be [c_out]".into()));
        }
        let (ph, pw) = (kh / 2, kw / 2);
        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = vec![0.0; t * f * c_out];
        for ti in 0..t {
            for fi in 0..f {
                let o_base = (ti * f + fi) * c_out;
                out[o_base..o_base + c_out].copy_from_slice(bd);
                for dh in 0..kh {
                    let si = ti as isize + dh as isize - ph as isize;
                    if si < 0 || si >= t as isize {
                        continue;
                    }
                    for dw in 0..kw {
                        let sj = fi as isize + dw as isize - pw as isize;
                        if sj < 0 || sj >= f as isize {
                            continue;
                        }
                        let x_base = (si as usize * f + sj as usize) * c_in;
                        let w_base = (dh * kw + dw) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = xd[x_base + ci];
                            let w_row = w_base + ci * c_out;
                            for co in 0..c_out {
                                out[o_base + co] += xv * wd[w_row + co];
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push_checked(vec![t, f, c_out], out, rg, Op::Conv2dSame { x, w, b })
    }

    /// Max-pool along the frequency axis (axis 1) of `[T, F, C]` by `width`.
    pub fn max_pool_freq(&mut self, x: Value, width: usize) -> Result<Value> {
        let xs = self.nodes[x.0].shape.clone();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("max_pool_freq expects [T,F,C], got {xs:?}")));
        }
        if width == 0 || !xs[1].is_multiple_of(width) {
            return Err(Error::Config(format!(
                "pool width {width} does not divide F={}",
                xs[1]
            )));
        }
        let (t, f, c) = (xs[0], xs[1], xs[2]);
        let f_out = f / width;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; t * f_out * c];
        let mut argmax = vec![0usize; t * f_out * c];
        for ti in 0..t {
            for fo in 0..f_out {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dw in 0..width {
                        let idx = (ti * f + fo * width + dw) * c + ci;
                        if xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                    let o = (ti * f_out + fo) * c + ci;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let rg = self.rg(x);
        self.push_checked(
            vec![t, f_out, c],
            out,
            rg,
            Op::MaxPoolFreq { x, argmax },
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Populates gradients for every
    /// node that reaches a tracked leaf, then clears the operation log;
    /// leaf gradients stay readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.finished {
            return Err(Error::Contract(
                "tape already cleared by a previous backward".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.grads[i].is_none() {
                continue;
            }
            let g = if matches!(self.nodes[i].op, Op::Leaf) {
                // keep leaf gradients readable after the pass
                self.grads[i].clone().unwrap()
            } else {
                self.grads[i].take().unwrap()
            };
            self.propagate(i, &g);
        }

        // clear the recorded operations; the tape cannot replay again
        for node in self.nodes.iter_mut() {
            node.op = Op::Leaf;
        }
        self.finished = true;
        Ok(())
    }

    fn accum(&mut self, v: Value, delta: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accum_slice(&mut self, v: Value, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].data.len();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) {
        // Take the op out so `self` can be borrowed mutably for accumulation.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                let da = crate::tensor::reduce_to_shape(g, &out_shape, &self.nodes[a.0].shape.clone());
                self.accum(*a, da);
                let db = crate::tensor::reduce_to_shape(g, &out_shape, &self.nodes[b.0].shape.clone());
                self.accum(*b, db);
            }
            Op::Sub(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                let da = crate::tensor::reduce_to_shape(g, &out_shape, &self.nodes[a.0].shape.clone());
                self.accum(*a, da);
                let neg: Vec<f64> = g.iter().map(|&v| -v).collect();
                let db = crate::tensor::reduce_to_shape(&neg, &out_shape, &self.nodes[b.0].shape.clone());
                self.accum(*b, db);
            }
            Op::Mul(a, b) => {
                let out_shape = self.nodes[idx].shape.clone();
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let prod = self.broadcast_mul_grad(g, b, &out_shape);
                    let da = crate::tensor::reduce_to_shape(&prod, &out_shape, &self.nodes[a.0].shape.clone());
                    self.accum(a, da);
                }
                if self.rg(b) {
                    let prod = self.broadcast_mul_grad(g, a, &out_shape);
                    let db = crate::tensor::reduce_to_shape(&prod, &out_shape, &self.nodes[b.0].shape.clone());
                    self.accum(b, db);
                }
            }
            Op::Affine(x, scale) => {
                let delta: Vec<f64> = g.iter().map(|&v| v * scale).collect();
                self.accum(*x, delta);
            }
            Op::Matmul { a, b, transpose_b } => {
                self.backward_matmul(idx, *a, *b, *transpose_b, g);
            }
            Op::Linear { x, w, b } => {
                let d_in = *self.nodes[x.0].shape.last().unwrap();
                let d_out = *self.nodes[w.0].shape.last().unwrap();
                let rows = self.nodes[x.0].data.len() / d_in;
                let (x, w, b) = (*x, *w, *b);
                if self.rg(x) {
                    let mut dx = vec![0.0; rows * d_in];
                    mm2d(g, &self.nodes[w.0].data, rows, d_out, d_in, false, true, &mut dx);
                    self.accum(x, dx);
                }
                if self.rg(w) {
                    let mut dw = vec![0.0; d_in * d_out];
                    mm2d(&self.nodes[x.0].data, g, d_in, rows, d_out, true, false, &mut dw);
                    self.accum(w, dw);
                }
                if self.rg(b) {
                    let mut db = vec![0.0; d_out];
                    for row in g.chunks(d_out) {
                        for (s, &v) in db.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accum(b, db);
                }
            }
            Op::SoftmaxLast(x) => {
                let last = *self.nodes[idx].shape.last().unwrap();
                let p = &self.nodes[idx].data;
                let mut dx = vec![0.0; p.len()];
                for ((p_row, g_row), dx_row) in
                    p.chunks(last).zip(g.chunks(last)).zip(dx.chunks_mut(last))
                {
                    let dot: f64 = p_row.iter().zip(g_row).map(|(&pv, &gv)| pv * gv).sum();
                    for j in 0..last {
                        dx_row[j] = p_row[j] * (g_row[j] - dot);
                    }
                }
                self.accum(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let d = *self.nodes[x.0].shape.last().unwrap();
                let xd = &self.nodes[x.0].data;
                let gd = &self.nodes[gain.0].data;
                let rows = xd.len() / d;
                let mut dx = vec![0.0; xd.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for row in 0..rows {
                    let (mean, inv_std) = stats[row];
                    let xr = &xd[row * d..(row + 1) * d];
                    let gr = &g[row * d..(row + 1) * d];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        let gs = gr[j] * gd[j];
                        m1 += gs;
                        m2 += gs * xhat;
                        dgain[j] += gr[j] * xhat;
                        dbias[j] += gr[j];
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * inv_std;
                        dx[row * d + j] = (gr[j] * gd[j] - m1 - xhat * m2) * inv_std;
                    }
                }
                self.accum(*x, dx);
                self.accum(*gain, dgain);
                self.accum(*bias, dbias);
            }
            Op::Relu(x) => {
                let xd = &self.nodes[x.0].data;
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accum(*x, dx);
            }
            Op::Sigmoid(x) => {
                let yd = &self.nodes[idx].data;
                let dx = g.iter().zip(yd).map(|(&gv, &y)| gv * y * (1.0 - y)).collect();
                self.accum(*x, dx);
            }
            Op::Ln(x) => {
                let xd = &self.nodes[x.0].data;
                let dx = g.iter().zip(xd).map(|(&gv, &xv)| gv / xv).collect();
                self.accum(*x, dx);
            }
            Op::Clamp(x, lo, hi) => {
                let xd = &self.nodes[x.0].data;
                let dx = g
                    .iter()
                    .zip(xd)
                    .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { 0.0 })
                    .collect();
                self.accum(*x, dx);
            }
            Op::SumAxis(x, axis) | Op::MeanAxis(x, axis) => {
                let mean = matches!(op, Op::MeanAxis(..));
                let shape = self.nodes[x.0].shape.clone();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            dx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                self.accum(*x, dx);
            }
            Op::SumAll(x) => {
                let n = self.nodes[x.0].data.len();
                self.accum(*x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x.0].data.len();
                self.accum(*x, vec![g[0] / n as f64; n]);
            }
            Op::Reshape(x) => {
                self.accum(*x, g.to_vec());
            }
            Op::PadAxis { x, axis, left } => {
                let shape = self.nodes[x.0].shape.clone();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let new_len = self.nodes[idx].shape[*axis];
                let mut dx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = (o * new_len + left + l) * inner;
                        let dst = (o * len + l) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                self.accum(*x, dx);
            }
            Op::WindowedGather { x, m, n, r } => {
                let (t, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let l_win = m + n + 1;
                let mut dx = vec![0.0; t * d];
                for i in 0..t {
                    for k in 0..l_win {
                        let j = i as isize + (*r as isize) * (k as isize - *m as isize);
                        if j < 0 || j >= t as isize {
                            continue;
                        }
                        let src = (i * l_win + k) * d;
                        let dst = j as usize * d;
                        for c in 0..d {
                            dx[dst + c] += g[src + c];
                        }
                    }
                }
                self.accum(*x, dx);
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .iter()
                    .zip(mask)
                    .map(|(&gv, &keep)| if keep { gv } else { 0.0 })
                    .collect();
                self.accum(*x, dx);
            }
            Op::ConcatLast(xs) => {
                let total_w = *self.nodes[idx].shape.last().unwrap();
                let rows = self.nodes[idx].data.len() / total_w;
                let mut offset = 0;
                for &v in xs {
                    let w = *self.nodes[v.0].shape.last().unwrap();
                    let mut dv = vec![0.0; rows * w];
                    for row in 0..rows {
                        dv[row * w..(row + 1) * w]
                            .copy_from_slice(&g[row * total_w + offset..row * total_w + offset + w]);
                    }
                    self.accum(v, dv);
                    offset += w;
                }
            }
            Op::IndexAxis { x, axis, index } => {
                let shape = self.nodes[x.0].shape.clone();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let (x, index) = (*x, *index);
                self.accum_slice(x, |dx| {
                    for o in 0..outer {
                        let dst = (o * len + index) * inner;
                        for i in 0..inner {
                            dx[dst + i] += g[o * inner + i];
                        }
                    }
                });
            }
            Op::StackAxis { xs, axis } => {
                let out_shape = self.nodes[idx].shape.clone();
                let (outer, len, inner) = split_axis(&out_shape, *axis);
                for (j, &v) in xs.iter().enumerate() {
                    let mut dv = vec![0.0; outer * inner];
                    for o in 0..outer {
                        let src = (o * len + j) * inner;
                        dv[o * inner..(o + 1) * inner].copy_from_slice(&g[src..src + inner]);
                    }
                    self.accum(v, dv);
                }
            }
            Op::Conv2dSame { x, w, b } => {
                self.backward_conv(idx, *x, *w, *b, g);
            }
            Op::MaxPoolFreq { x, argmax } => {
                let (x, argmax) = (*x, argmax.clone());
                self.accum_slice(x, |dx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                });
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accum(*x, dx);
            }
        }
    }

    /// g * data(other) expanded over `out_shape` (for Mul backward).
    fn broadcast_mul_grad(&self, g: &[f64], other: Value, out_shape: &[usize]) -> Vec<f64> {
        let strides = broadcast_strides(&self.nodes[other.0].shape, out_shape);
        let od = &self.nodes[other.0].data;
        let ndim = out_shape.len();
        let mut coords = vec![0usize; ndim];
        g.iter()
            .enumerate()
            .map(|(flat, &gv)| {
                let mut rem = flat;
                for d in (0..ndim).rev() {
                    coords[d] = rem % out_shape[d];
                    rem /= out_shape[d];
                }
                let mut io = 0;
                for d in 0..ndim {
                    io += coords[d] * strides[d];
                }
                gv * od[io]
            })
            .collect()
    }

    fn backward_matmul(&mut self, idx: usize, a: Value, b: Value, transpose_b: bool, g: &[f64]) {
        let ashape = self.nodes[a.0].shape.clone();
        let bshape = self.nodes[b.0].shape.clone();
        let (p, q) = (ashape[ashape.len() - 2], ashape[ashape.len() - 1]);
        let r = *self.nodes[idx].shape.last().unwrap();
        let batch = self.nodes[idx].shape[..self.nodes[idx].shape.len() - 2].to_vec();
        let n_batch = numel(&batch);
        let sa = batch_offsets(&ashape[..ashape.len() - 2], &batch, p * q);
        let sb = batch_offsets(&bshape[..bshape.len() - 2], &batch, q * r);
        if self.rg(a) {
            let mut da = vec![0.0; self.nodes[a.0].data.len()];
            for i in 0..n_batch {
                let gb = &g[i * p * r..(i + 1) * p * r];
                let bb = &self.nodes[b.0].data[sb[i]..sb[i] + q * r];
                // dA = g @ B^T (plain) or g @ B (when B was used transposed)
                mm2d(gb, bb, p, r, q, false, !transpose_b, &mut da[sa[i]..sa[i] + p * q]);
            }
            self.accum(a, da);
        }
        if self.rg(b) {
            let mut db = vec![0.0; self.nodes[b.0].data.len()];
            for i in 0..n_batch {
                let gb = &g[i * p * r..(i + 1) * p * r];
                let ab = &self.nodes[a.0].data[sa[i]..sa[i] + p * q];
                if transpose_b {
                    // B stored [r, q]; dB = g^T @ A
                    mm2d(gb, ab, r, p, q, true, false, &mut db[sb[i]..sb[i] + q * r]);
                } else {
                    // dB = A^T @ g
                    mm2d(ab, gb, q, p, r, true, false, &mut db[sb[i]..sb[i] + q * r]);
                }
            }
            self.accum(b, db);
        }
    }

    fn backward_conv(&mut self, idx: usize, x: Value, w: Value, b: Value, g: &[f64]) {
        let xs = self.nodes[x.0].shape.clone();
        let ws = self.nodes[w.0].shape.clone();
        let (t, f, c_in) = (xs[0], xs[1], xs[2]);
        let (kh, kw, c_out) = (ws[0], ws[1], ws[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let _ = idx;
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut dx = if need_x { vec![0.0; t * f * c_in] } else { Vec::new() };
        let mut dw = if need_w { vec![0.0; kh * kw * c_in * c_out] } else { Vec::new() };
        {
            let xd = &self.nodes[x.0].data;
            let wd = &self.nodes[w.0].data;
            for ti in 0..t {
                for fi in 0..f {
                    let g_base = (ti * f + fi) * c_out;
                    for dh in 0..kh {
                        let si = ti as isize + dh as isize - ph as isize;
                        if si < 0 || si >= t as isize {
                            continue;
                        }
                        for dwi in 0..kw {
                            let sj = fi as isize + dwi as isize - pw as isize;
                            if sj < 0 || sj >= f as isize {
                                continue;
                            }
                            let x_base = (si as usize * f + sj as usize) * c_in;
                            let w_base = (dh * kw + dwi) * c_in * c_out;
                            for ci in 0..c_in {
                                let w_row = w_base + ci * c_out;
                                if need_x {
                                    let mut s = 0.0;
                                    for co in 0..c_out {
                                        s += g[g_base + co] * wd[w_row + co];
                                    }
                                    dx[x_base + ci] += s;
                                }
                                if need_w {
                                    let xv = xd[x_base + ci];
                                    for co in 0..c_out {
                                        dw[w_row + co] += xv * g[g_base + co];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            self.accum(x, dx);
        }
        if need_w {
            self.accum(w, dw);
        }
        if self.rg(b) {
            let mut db = vec![0.0; c_out];
            for chunk in g.chunks(c_out) {
                for (s, &v) in db.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            self.accum(b, db);
        }
    }
}

/// (prod before axis, axis length, prod after axis)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Flat data offsets of each broadcast batch index into a tensor whose
/// batch dims are `shape` and whose matrix block is `block` elements.
fn batch_offsets(shape: &[usize], out_batch: &[usize], block: usize) -> Vec<usize> {
    let n = numel(out_batch);
    if out_batch.is_empty() {
        return vec![0];
    }
    let padded = pad_rank(shape, out_batch.len());
    let mut strides = vec![0usize; out_batch.len()];
    let mut acc = block;
    for d in (0..padded.len()).rev() {
        strides[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    let ndim = out_batch.len();
    let mut out = vec![0usize; n];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut off = 0;
        for d in (0..ndim).rev() {
            let c = rem % out_batch[d];
            rem /= out_batch[d];
            off += c * strides[d];
        }
        *slot = off;
    }
    out
}

/// out[m, n] += op(a) @ op(b) where op transposes the stored layout when
/// the corresponding flag is set. `a` stores [m,k] (or [k,m] if `ta`),
/// `b` stores [k,n] (or [n,k] if `tb`).
#[allow(clippy::too_many_arguments)]
fn mm2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                for kk in 0..k {
                    let av = a[i * k + kk];
                    if av == 0.0 {
                        continue;
                    }
                    let b_row = &b[kk * n..(kk + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let b_row = &b[j * k..(j + 1) * k];
                    let mut s = 0.0;
                    for (av, bv) in a_row.iter().zip(b_row) {
                        s += av * bv;
                    }
                    out[i * n + j] += s;
                }
            }
        }
        (true, false) => {
            // a stored [k, m]
            for kk in 0..k {
                let b_row = &b[kk * n..(kk + 1) * n];
                for i in 0..m {
                    let av = a[kk * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let out_row = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            // a stored [k, m], b stored [n, k]
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for kk in 0..k {
                        s += a[kk * m + i] * b[j * k + kk];
                    }
                    out[i * n + j] += s;
                }
            }
        }
    }
}
