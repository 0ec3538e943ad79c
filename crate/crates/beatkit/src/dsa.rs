//! Dilated self-attention.
//!
//! A query at position `i` attends only to keys at `i + r*k` for window
//! offsets `k` in `[-m, n]`, with dilation rate `r`. The production kernel
//! ([`dsa_forward`]) gathers keys and values into a `[T, l_win, d_f]` layout
//! via pad-and-roll and costs O(T * l_win) in time and memory. The
//! quadratic-cost masked formulation lives in [`reference`] and serves as
//! the equivalence oracle.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Attention geometry: window components, dilation, head layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsaConfig {
    /// Backward (past) window length in steps of `r`.
    pub m: usize,
    /// Forward (future) window length in steps of `r`.
    pub n: usize,
    /// Dilation rate, >= 1.
    pub r: usize,
    /// Per-head feature width.
    pub d_f: usize,
    /// Per-head `(m, n)` pairs for multi-head assembly.
    pub heads: Vec<(usize, usize)>,
}

impl DsaConfig {
    /// Symmetric single-head window.
    pub fn symmetric(half: usize, r: usize, d_f: usize) -> Self {
        DsaConfig {
            m: half,
            n: half,
            r,
            d_f,
            heads: vec![(half, half)],
        }
    }

    /// Window size `l_win = m + n + 1`.
    pub fn l_win(&self) -> usize {
        self.m + self.n + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 {
            return Err(Error::Config("dilation rate must be >= 1".into()));
        }
        if self.d_f == 0 {
            return Err(Error::Config("d_f must be >= 1".into()));
        }
        Ok(())
    }
}

/// The eight-head layout used at paper scale: four symmetric windows
/// (m = n = 2) and four skewed ones with m in {0, 1, 3, 4}, n = 4 - m.
/// Every head has l_win = 5.
pub fn paper_head_windows() -> Vec<(usize, usize)> {
    vec![
        (2, 2),
        (2, 2),
        (2, 2),
        (2, 2),
        (0, 4),
        (1, 3),
        (3, 1),
        (4, 0),
    ]
}

/// Learned per-offset key bias: one d_f vector per window offset.
#[derive(Debug, Clone)]
pub struct RelativeBias {
    /// `[l_win, d_f]`, row `k` belongs to offset `k - m`.
    pub offsets: Tensor,
}

impl RelativeBias {
    pub fn zeros(l_win: usize, d_f: usize) -> Self {
        RelativeBias {
            offsets: Tensor::zeros(&[l_win, d_f]),
        }
    }
}

/// Validity of each `[T, l_win]` window slot: slot `(i, k)` is real iff
/// `i + r*(k - m)` lands inside `[0, T)`.
pub fn window_mask(t: usize, m: usize, n: usize, r: usize) -> Vec<bool> {
    let l_win = m + n + 1;
    let mut mask = vec![false; t * l_win];
    for i in 0..t {
        for k in 0..l_win {
            let j = i as isize + r as isize * (k as isize - m as isize);
            mask[i * l_win + k] = j >= 0 && (j as usize) < t;
        }
    }
    mask
}

/// Roll `x` (`[T, d]`) into the windowed layout `[T, l_win, d]`.
///
/// Realized by padding `m*r` steps left and `n*r` right, taking `l_win`
/// shifted copies stacked on a new axis, and truncating to `T` rows. Pad
/// slots hold zeros; [`window_mask`] marks them for masking. A `T x T`
/// buffer is never materialized.
pub fn pad_and_roll(tape: &mut Tape, x: Value, cfg: &DsaConfig) -> Result<Value> {
    cfg.validate()?;
    tape.windowed_gather(x, cfg.m, cfg.n, cfg.r)
}

/// One head of dilated self-attention plus its row-stochastic weights.
pub struct DsaOutput {
    /// `[T, d_f]` attention output.
    pub output: Value,
    /// `[T, l_win]` softmax weights (zeros at masked slots).
    pub probs: Value,
}

/// Linear-complexity dilated attention for one head.
///
/// Logits are `(Q_i . K_{i+rk} + Q_i . a_k) / sqrt(d_f)` for in-range
/// offsets and `-inf` otherwise; the output is the weighted average of the
/// gathered values. Time and memory are O(T * l_win).
pub fn dsa_forward(
    tape: &mut Tape,
    q: Value,
    k: Value,
    v: Value,
    cfg: &DsaConfig,
    bias: Option<Value>,
) -> Result<DsaOutput> {
    cfg.validate()?;
    let qs = tape.shape(q).to_vec();
    if qs.len() != 2 || tape.shape(k) != qs || tape.shape(v) != qs {
        return Err(Error::Shape(format!(
            "dsa_forward expects equal [T, d_f] inputs, got {:?}/{:?}/{:?}",
            qs,
            tape.shape(k),
            tape.shape(v)
        )));
    }
    let (t, d_f) = (qs[0], qs[1]);
    if d_f != cfg.d_f {
        return Err(Error::Shape(format!(
            "input width {d_f} != configured d_f {}",
            cfg.d_f
        )));
    }
    let l_win = cfg.l_win();

    let kw = pad_and_roll(tape, k, cfg)?; // [T, l_win, d_f]
    let vw = pad_and_roll(tape, v, cfg)?;

    // e[i, k] = Q_i . K_{i+rk}, batched over T
    let q3 = tape.reshape(q, vec![t, 1, d_f])?;
    let e = tape.matmul_nt(q3, kw)?; // [T, 1, l_win]
    let e = tape.reshape(e, vec![t, l_win])?;

    // additive key-side relative position term: Q_i . a_k
    let e = match bias {
        Some(b) => {
            let bs = tape.shape(b);
            if bs != [l_win, d_f] {
                return Err(Error::Shape(format!(
                    "relative bias must be [{l_win}, {d_f}], got {bs:?}"
                )));
            }
            let eb = tape.matmul_nt(q, b)?; // [T, l_win]
            tape.add(e, eb)?
        }
        None => e,
    };

    let scaled = tape.scale(e, 1.0 / (d_f as f64).sqrt())?;
    let mask = window_mask(t, cfg.m, cfg.n, cfg.r);
    // every row keeps at least k = 0, so softmax cannot degenerate
    debug_assert!(mask.chunks(l_win).all(|row| row.iter().any(|&v| v)));
    let masked = tape.masked_fill(scaled, &mask, f64::NEG_INFINITY)?;
    let probs = tape.softmax_lastdim(masked)?; // [T, l_win]

    let p3 = tape.reshape(probs, vec![t, 1, l_win])?;
    let z = tape.matmul(p3, vw)?; // [T, 1, d_f]
    let output = tape.reshape(z, vec![t, d_f])?;
    Ok(DsaOutput { output, probs })
}

/// Per-head projection parameters, already bound to a tape.
pub struct HeadParams {
    pub wq: Value,
    pub bq: Value,
    pub wk: Value,
    pub bk: Value,
    pub wv: Value,
    pub bv: Value,
    /// `[l_win, d_f]` relative position embedding for this head.
    pub rpe: Value,
}

/// Multi-head assembly parameters.
pub struct MultiHeadParams {
    pub heads: Vec<HeadParams>,
    pub wo: Value,
    pub bo: Value,
}

pub struct MultiHeadOutput {
    /// `[T, d_model]`.
    pub output: Value,
    /// Per-head `[T, l_win]` attention weights.
    pub probs: Vec<Value>,
}

/// Project to per-head Q/K/V, run [`dsa_forward`] per head with that head's
/// window, concatenate, and apply the output projection.
pub fn multi_head_dsa(
    tape: &mut Tape,
    x: Value,
    params: &MultiHeadParams,
    cfg: &DsaConfig,
) -> Result<MultiHeadOutput> {
    let d_model = *tape
        .shape(x)
        .last()
        .ok_or_else(|| Error::Shape("multi_head_dsa on scalar".into()))?;
    if cfg.heads.is_empty() {
        return Err(Error::Config("multi_head_dsa needs at least one head".into()));
    }
    if d_model != cfg.heads.len() * cfg.d_f {
        return Err(Error::Config(format!(
            "d_model {d_model} != heads {} x d_f {}",
            cfg.heads.len(),
            cfg.d_f
        )));
    }
    if cfg.heads.len() != params.heads.len() {
        return Err(Error::Config(format!(
            "{} head windows but {} head parameter sets",
            cfg.heads.len(),
            params.heads.len()
        )));
    }
    let mut outputs = Vec::with_capacity(cfg.heads.len());
    let mut probs = Vec::with_capacity(cfg.heads.len());
    for (h, &(m, n)) in cfg.heads.iter().enumerate() {
        let hp = &params.heads[h];
        let q = tape.linear(x, hp.wq, hp.bq)?;
        let k = tape.linear(x, hp.wk, hp.bk)?;
        let v = tape.linear(x, hp.wv, hp.bv)?;
        let head_cfg = DsaConfig {
            m,
            n,
            r: cfg.r,
            d_f: cfg.d_f,
            heads: vec![(m, n)],
        };
        let head = dsa_forward(tape, q, k, v, &head_cfg, Some(hp.rpe))?;
        outputs.push(head.output);
        probs.push(head.probs);
    }
    let concat = tape.concat_last(&outputs)?;
    let output = tape.linear(concat, params.wo, params.bo)?;
    Ok(MultiHeadOutput { output, probs })
}

/// Receptive field of a stack of dilated layers: `1 + sum_l (m+n)*r_l`
/// over each layer's widest head, converted to seconds at `fps`.
pub fn receptive_field(layers: &[DsaConfig], fps: f64) -> Result<(usize, f64)> {
    if layers.is_empty() {
        return Err(Error::Config("receptive_field of zero layers".into()));
    }
    if fps <= 0.0 {
        return Err(Error::Config(format!("fps must be positive, got {fps}")));
    }
    let mut frames = 1usize;
    for cfg in layers {
        cfg.validate()?;
        let span = cfg
            .heads
            .iter()
            .map(|&(m, n)| m + n)
            .max()
            .unwrap_or(0)
            .max(cfg.m + cfg.n);
        frames += span * cfg.r;
    }
    Ok((frames, frames as f64 / fps))
}

/// Quadratic-cost masked attention, kept as the equivalence oracle.
pub mod reference {
    use super::DsaConfig;
    use crate::error::{Error, Result};
    use crate::tensor::Tensor;

    /// Positions attainable from `i` under the dilated window: every
    /// `j = i + r*k` with `-m <= k <= n` that lies in `[0, t)`.
    pub fn attainable_set(i: usize, t: usize, cfg: &DsaConfig) -> Vec<usize> {
        let mut out = Vec::new();
        for k in -(cfg.m as isize)..=(cfg.n as isize) {
            let j = i as isize + cfg.r as isize * k;
            if j >= 0 && (j as usize) < t {
                out.push(j as usize);
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Full `T x T` masked attention. Computes every pairwise logit, masks
    /// unattainable positions to `-inf`, softmaxes each row, and averages
    /// the values. O(T^2) time and memory by construction; this is the test
    /// oracle, not the production kernel.
    pub fn masked_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &DsaConfig) -> Result<Tensor> {
        cfg.validate()?;
        if q.shape().len() != 2 || q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(Error::Shape(format!(
                "masked_attention expects equal [T, d_f] inputs, got {:?}/{:?}/{:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        let (t, d_f) = (q.shape()[0], q.shape()[1]);
        let scale = 1.0 / (d_f as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());

        // all pairwise logits first: the quadratic cost is the point
        let mut logits = vec![0.0f64; t * t];
        for i in 0..t {
            let qi = &qd[i * d_f..(i + 1) * d_f];
            for j in 0..t {
                let kj = &kd[j * d_f..(j + 1) * d_f];
                let mut s = 0.0;
                for (a, b) in qi.iter().zip(kj) {
                    s += a * b;
                }
                logits[i * t + j] = s * scale;
            }
        }
        // mask positions outside the dilated window
        let mut keep = vec![false; t];
        for i in 0..t {
            let row = &mut logits[i * t..(i + 1) * t];
            keep.iter_mut().for_each(|k| *k = false);
            for j in attainable_set(i, t, cfg) {
                keep[j] = true;
            }
            for (slot, ok) in row.iter_mut().zip(&keep) {
                if !ok {
                    *slot = f64::NEG_INFINITY;
                }
            }
        }
        // row softmax in place
        for i in 0..t {
            let row = &mut logits[i * t..(i + 1) * t];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            debug_assert!(max > f64::NEG_INFINITY, "k = 0 keeps the diagonal");
            let mut sum = 0.0;
            for slot in row.iter_mut() {
                *slot = if *slot == f64::NEG_INFINITY {
                    0.0
                } else {
                    (*slot - max).exp()
                };
                sum += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        // output = P V
        let mut out = vec![0.0f64; t * d_f];
        for i in 0..t {
            for j in 0..t {
                let p = logits[i * t + j];
                if p == 0.0 {
                    continue;
                }
                let vj = &vd[j * d_f..(j + 1) * d_f];
                let orow = &mut out[i * d_f..(i + 1) * d_f];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o += p * vv;
                }
            }
        }
        Tensor::new(vec![t, d_f], out)
    }
}
