//! Markov-chain interpretation of temporal attention.
//!
//! Each TTL's windowed attention, densified to `T x T`, is a row-stochastic
//! transition matrix whose support is exactly `j = i + r*k` over the window
//! offsets. The left-to-right product over layers gives the L-step
//! transition matrix; its column mass shows where the model's attention
//! accumulates.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::LayerAttention;

/// Dense products are capped at this sequence length to bound memory.
pub const MAX_DENSE_FRAMES: usize = 2048;

/// Which head's attention to densify.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadSelect {
    /// Average across heads (row-stochasticity is preserved).
    Average,
    Single(usize),
}

impl std::fmt::Display for HeadSelect {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HeadSelect::Average => write!(f, "avg"),
            HeadSelect::Single(h) => write!(f, "{h}"),
        }
    }
}

/// Row-stochastic `T x T` transition matrix with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    t: usize,
    data: Vec<f64>,
    /// Number of one-step matrices multiplied into this one.
    pub steps: usize,
    /// TTL indices the product spans.
    pub layers: Vec<usize>,
}

impl TransitionMatrix {
    pub fn frames(&self) -> usize {
        self.t
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.t + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.t..(i + 1) * self.t]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.t).map(|r| r.iter().sum()).collect()
    }

    /// Column sums: how much attention mass lands on each frame.
    pub fn column_mass(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.t];
        for row in self.data.chunks(self.t) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Nonzeros per row.
    pub fn row_nnz(&self) -> Vec<usize> {
        self.data
            .chunks(self.t)
            .map(|r| r.iter().filter(|&&v| v != 0.0).count())
            .collect()
    }

    pub fn validate_row_stochastic(&self, tol: f64) -> Result<()> {
        for (i, s) in self.row_sums().iter().enumerate() {
            if (s - 1.0).abs() > tol {
                return Err(Error::Contract(format!("row {i} sums to {s}")));
            }
        }
        if self.data.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("negative transition probability".into()));
        }
        Ok(())
    }
}

/// Densify one captured TTL attention into a `T x T` transition matrix.
pub fn layer_attention_matrix(attn: &LayerAttention, head: HeadSelect) -> Result<TransitionMatrix> {
    if attn.probs.is_empty() {
        return Err(Error::Contract("no attention heads captured".into()));
    }
    let t = attn.probs[0].shape()[0];
    if t > MAX_DENSE_FRAMES {
        return Err(Error::Config(format!(
            "clip has {t} frames; dense analysis is capped at {MAX_DENSE_FRAMES}"
        )));
    }
    let heads: Vec<usize> = match head {
        HeadSelect::Average => (0..attn.probs.len()).collect(),
        HeadSelect::Single(h) => {
            if h >= attn.probs.len() {
                return Err(Error::Config(format!(
                    "head {h} out of range for {} heads",
                    attn.probs.len()
                )));
            }
            vec![h]
        }
    };
    let weight = 1.0 / heads.len() as f64;
    let mut data = vec![0.0; t * t];
    for &h in &heads {
        let probs = &attn.probs[h];
        let (m, n) = attn.windows[h];
        let l_win = m + n + 1;
        if probs.shape() != [t, l_win] {
            return Err(Error::Shape(format!(
                "head {h} probs have shape {:?}, expected [{t}, {l_win}]",
                probs.shape()
            )));
        }
        let pd = probs.data();
        for i in 0..t {
            for k in 0..l_win {
                let j = i as isize + attn.r as isize * (k as isize - m as isize);
                if j >= 0 && (j as usize) < t {
                    data[i * t + j as usize] += weight * pd[i * l_win + k];
                }
            }
        }
    }
    let out = TransitionMatrix {
        t,
        data,
        steps: 1,
        layers: vec![attn.layer],
    };
    out.validate_row_stochastic(1e-9)?;
    Ok(out)
}

/// Left-to-right product over layers: `P^(L) = P^1 P^2 ... P^L`.
///
/// The right factor of each step is one layer's sparse window, so the
/// product iterates its nonzeros instead of doing dense `T^3` work.
pub fn multi_step_product(mats: &[TransitionMatrix]) -> Result<TransitionMatrix> {
    let first = mats
        .first()
        .ok_or_else(|| Error::Contract("product of zero matrices".into()))?;
    let t = first.t;
    let mut acc = first.clone();
    for right in &mats[1..] {
        if right.t != t {
            return Err(Error::Shape(format!(
                "matrix sizes differ: {t} vs {}",
                right.t
            )));
        }
        // nonzero columns of each right row, computed once
        let right_nnz: Vec<Vec<u32>> = (0..t)
            .map(|j| {
                right.row(j)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(k, _)| k as u32)
                    .collect()
            })
            .collect();
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            let left_row = acc.row(i);
            let out_row = &mut next[i * t..(i + 1) * t];
            for (j, &lv) in left_row.iter().enumerate() {
                if lv == 0.0 {
                    continue;
                }
                let r_row = right.row(j);
                for &k in &right_nnz[j] {
                    out_row[k as usize] += lv * r_row[k as usize];
                }
            }
        }
        acc = TransitionMatrix {
            t,
            data: next,
            steps: acc.steps + right.steps,
            layers: {
                let mut l = acc.layers.clone();
                l.extend_from_slice(&right.layers);
                l
            },
        };
    }
    Ok(acc)
}

/// Ratio of mean column mass at the given frames to the mean elsewhere.
pub fn beat_mass_ratio(matrix: &TransitionMatrix, beat_frames: &[usize]) -> Result<f64> {
    let t = matrix.frames();
    let mut is_beat = vec![false; t];
    for &f in beat_frames {
        if f >= t {
            return Err(Error::Contract(format!("beat frame {f} beyond {t}")));
        }
        is_beat[f] = true;
    }
    let mass = matrix.column_mass();
    let (mut on, mut on_n, mut off, mut off_n) = (0.0, 0usize, 0.0, 0usize);
    for (j, &m) in mass.iter().enumerate() {
        if is_beat[j] {
            on += m;
            on_n += 1;
        } else {
            off += m;
            off_n += 1;
        }
    }
    if on_n == 0 || off_n == 0 {
        return Err(Error::Contract("need both beat and non-beat frames".into()));
    }
    Ok((on / on_n as f64) / (off / off_n as f64))
}

/// Canonical export file stem: `P_L{steps}_head{h|avg}`.
pub fn export_stem(steps: usize, head: HeadSelect) -> String {
    format!("P_L{steps}_head{head}")
}

/// Full-precision CSV, one row per line. Values use the shortest
/// representation that round-trips exactly.
pub fn export_csv(matrix: &TransitionMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in matrix.data.chunks(matrix.t) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            out.push_str(&format!("{v}"));
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Parse a CSV written by [`export_csv`].
pub fn import_csv(path: &Path) -> Result<TransitionMatrix> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut t = 0usize;
    for line in text.lines() {
        let row: Vec<f64> = line
            .split(',')
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad CSV cell {s:?}")))
            })
            .collect::<Result<_>>()?;
        if t == 0 {
            t = row.len();
        } else if row.len() != t {
            return Err(Error::Format("ragged CSV".into()));
        }
        data.extend(row);
    }
    if data.len() != t * t {
        return Err(Error::Format("CSV is not square".into()));
    }
    Ok(TransitionMatrix {
        t,
        data,
        steps: 0,
        layers: Vec::new(),
    })
}

/// 8-bit binary portable graymap with per-row max normalization.
pub fn export_pgm(matrix: &TransitionMatrix, path: &Path) -> Result<()> {
    let t = matrix.t;
    let mut bytes = Vec::with_capacity(t * t + 32);
    bytes.extend_from_slice(format!("P5\n{t} {t}\n255\n").as_bytes());
    for row in matrix.data.chunks(t) {
        let max = row.iter().cloned().fold(0.0, f64::max);
        for &v in row {
            let pixel = if max > 0.0 {
                (v / max * 255.0).round() as u8
            } else {
                0
            };
            bytes.push(pixel);
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
