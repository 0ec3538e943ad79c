//! Supervision targets, the multi-task loss, and partial-demix augmentation.

use crate::error::{Error, Result};
use crate::model::{ActivationTrack, DemixedClip};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Value};

/// Clip to predicted probabilities before taking logs.
pub const PROB_CLIP: f64 = 1e-7;

/// Number of one-BPM tempo classes; class `c` (0-based) is `c + 1` BPM.
pub const TEMPO_CLASSES: usize = 300;

/// Ground-truth beat events for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    /// Strictly ascending beat times in seconds.
    pub beat_times: Vec<f64>,
    /// 1-based position in bar per beat (1 = downbeat).
    pub beat_positions: Vec<usize>,
    pub beats_per_bar: usize,
}

impl Annotation {
    pub fn validate(&self) -> Result<()> {
        if self.beat_times.len() != self.beat_positions.len() {
            return Err(Error::Annotation("times/positions length mismatch".into()));
        }
        if self.beat_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Annotation("beat times must be strictly ascending".into()));
        }
        if self.beats_per_bar == 0 {
            return Err(Error::Annotation("beats_per_bar must be >= 1".into()));
        }
        for w in self.beat_positions.windows(2) {
            let expect = w[0] % self.beats_per_bar + 1;
            if w[1] != expect {
                return Err(Error::Annotation(format!(
                    "positions must cycle 1..{}, got {} after {}",
                    self.beats_per_bar, w[1], w[0]
                )));
            }
        }
        if self.beat_positions.iter().any(|&p| p == 0 || p > self.beats_per_bar) {
            return Err(Error::Annotation("position outside 1..beats_per_bar".into()));
        }
        Ok(())
    }

    /// Times of position-1 beats.
    pub fn downbeat_times(&self) -> Vec<f64> {
        self.beat_times
            .iter()
            .zip(&self.beat_positions)
            .filter(|(_, &p)| p == 1)
            .map(|(&t, _)| t)
            .collect()
    }

    /// Restrict to `[start_s, end_s)` and rebase times to `start_s`.
    pub fn window(&self, start_s: f64, end_s: f64) -> Annotation {
        let mut times = Vec::new();
        let mut positions = Vec::new();
        for (&t, &p) in self.beat_times.iter().zip(&self.beat_positions) {
            if t >= start_s && t < end_s {
                times.push(t - start_s);
                positions.push(p);
            }
        }
        Annotation {
            beat_times: times,
            beat_positions: positions,
            beats_per_bar: self.beats_per_bar,
        }
    }
}

/// Soft supervision signals for one clip.
#[derive(Debug, Clone)]
pub struct TargetTrack {
    pub beat: Vec<f64>,
    pub downbeat: Vec<f64>,
    pub tempo: Vec<f64>,
}

/// Spread each annotated frame to its +-2 neighbours with weights 1.0, 0.5,
/// 0.25; overlaps combine by elementwise max; frames outside `[0, t)` clip.
fn widen(frames: &[usize], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t];
    for &f in frames {
        for (offset, w) in [(-2isize, 0.25), (-1, 0.5), (0, 1.0), (1, 0.5), (2, 0.25)] {
            let idx = f as isize + offset;
            if idx >= 0 && (idx as usize) < t {
                let slot = &mut out[idx as usize];
                *slot = f64::max(*slot, w);
            }
        }
    }
    out
}

fn times_to_frames(times: &[f64], t: usize, fps: f64) -> Result<Vec<usize>> {
    times
        .iter()
        .map(|&time| {
            let frame = (time * fps).round();
            if frame < 0.0 || frame as usize >= t {
                Err(Error::Annotation(format!(
                    "beat at {time:.3}s lands on frame {frame}, beyond clip of {t} frames"
                )))
            } else {
                Ok(frame as usize)
            }
        })
        .collect()
}

/// Widened beat and downbeat target sequences of length `t`.
pub fn widen_targets(ann: &Annotation, t: usize, fps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    ann.validate()?;
    let beat_frames = times_to_frames(&ann.beat_times, t, fps)?;
    let down_frames = times_to_frames(&ann.downbeat_times(), t, fps)?;
    Ok((widen(&beat_frames, t), widen(&down_frames, t)))
}

/// Tempo distribution from the median inter-beat interval: a unit mass at
/// the rounded BPM class smoothed over its neighbours with weights
/// 0.25/0.5/0.25, renormalized, clamped to [1, 300] BPM.
pub fn derive_tempo_target(ann: &Annotation) -> Result<Vec<f64>> {
    if ann.beat_times.len() < 2 {
        return Err(Error::Annotation(format!(
            "cannot derive tempo from {} beats",
            ann.beat_times.len()
        )));
    }
    let mut intervals: Vec<f64> = ann.beat_times.windows(2).map(|w| w[1] - w[0]).collect();
    intervals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if intervals.len() % 2 == 1 {
        intervals[intervals.len() / 2]
    } else {
        let hi = intervals.len() / 2;
        0.5 * (intervals[hi - 1] + intervals[hi])
    };
    let bpm = (60.0 / median).round().clamp(1.0, TEMPO_CLASSES as f64) as usize;
    let mut target = vec![0.0; TEMPO_CLASSES];
    let mut total = 0.0;
    for (offset, w) in [(-1isize, 0.25), (0, 0.5), (1, 0.25)] {
        let class = bpm as isize + offset;
        if class >= 1 && class <= TEMPO_CLASSES as isize {
            target[(class - 1) as usize] += w;
            total += w;
        }
    }
    for v in target.iter_mut() {
        *v /= total;
    }
    Ok(target)
}

/// All three supervision signals for one clip.
pub fn build_target_track(ann: &Annotation, t: usize, fps: f64) -> Result<TargetTrack> {
    let (beat, downbeat) = widen_targets(ann, t, fps)?;
    let tempo = derive_tempo_target(ann)?;
    Ok(TargetTrack {
        beat,
        downbeat,
        tempo,
    })
}

/// Mean binary cross entropy between a prediction sequence and a soft
/// target, on the tape (differentiable).
pub fn bce_mean(tape: &mut Tape, pred: Value, target: &[f64]) -> Result<Value> {
    if tape.data(pred).len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            tape.data(pred).len(),
            target.len()
        )));
    }
    let t = tape.constant(&Tensor::new(vec![target.len()], target.to_vec())?);
    let p = tape.clamp(pred, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let ln_p = tape.ln(p)?;
    let pos = tape.mul(t, ln_p)?;
    let one_minus_p = tape.affine(p, -1.0, 1.0)?;
    let ln_q = tape.ln(one_minus_p)?;
    let one_minus_t = tape.affine(t, -1.0, 1.0)?;
    let neg = tape.mul(one_minus_t, ln_q)?;
    let s = tape.add(pos, neg)?;
    let m = tape.mean_all(s)?;
    tape.scale(m, -1.0)
}

/// Cross entropy between a predicted distribution and a target
/// distribution, on the tape.
pub fn cross_entropy(tape: &mut Tape, pred: Value, target: &[f64]) -> Result<Value> {
    if tape.data(pred).len() != target.len() {
        return Err(Error::Shape(format!(
            "prediction length {} != target length {}",
            tape.data(pred).len(),
            target.len()
        )));
    }
    let t = tape.constant(&Tensor::new(vec![target.len()], target.to_vec())?);
    let p = tape.clamp(pred, PROB_CLIP, 1.0 - PROB_CLIP)?;
    let ln_p = tape.ln(p)?;
    let weighted = tape.mul(t, ln_p)?;
    let s = tape.sum_all(weighted)?;
    tape.scale(s, -1.0)
}

/// Equal-weight multi-task loss `(L_beat + L_downbeat + L_tempo) / 3`,
/// differentiable through the tape.
pub fn multitask_loss_on_tape(
    tape: &mut Tape,
    beat: Value,
    downbeat: Value,
    tempo: Value,
    tgt: &TargetTrack,
) -> Result<Value> {
    let l_beat = bce_mean(tape, beat, &tgt.beat)?;
    let l_down = bce_mean(tape, downbeat, &tgt.downbeat)?;
    let l_tempo = cross_entropy(tape, tempo, &tgt.tempo)?;
    let s = tape.add(l_beat, l_down)?;
    let s = tape.add(s, l_tempo)?;
    tape.scale(s, 1.0 / 3.0)
}

/// Plain-value multi-task loss over finished activations.
pub fn multitask_loss(acts: &ActivationTrack, tgt: &TargetTrack) -> Result<f64> {
    let mut tape = Tape::new();
    let beat = tape.constant(&Tensor::from_vec(acts.beat.clone())?);
    let down = tape.constant(&Tensor::from_vec(acts.downbeat.clone())?);
    let tempo = tape.constant(&Tensor::from_vec(acts.tempo.clone())?);
    let loss = multitask_loss_on_tape(&mut tape, beat, down, tempo, tgt)?;
    Ok(tape.data(loss)[0])
}

/// How many channels each augmentation branch merges, with probabilities
/// 0.5 (none), 0.3, 0.1, 0.1.
fn draw_merge_count(rng: &mut Rng) -> usize {
    let u = rng.next_f64();
    if u < 0.5 {
        0
    } else if u < 0.8 {
        2
    } else if u < 0.9 {
        3
    } else {
        4
    }
}

/// Partial-demix augmentation: with probability 0.5 the clip passes through
/// unchanged; otherwise 2, 3, or 4 of the five stems (probability
/// 0.3/0.1/0.1) are replaced by their sum, merged in linear magnitude
/// (values store log(1 + magnitude)). The merged stem keeps the position of
/// its first member; names join with `&`.
pub fn partial_demix_augment(clip: &DemixedClip, rng: &mut Rng) -> Result<DemixedClip> {
    if clip.channels() != 5 {
        return Err(Error::Contract(format!(
            "partial demix expects 5 channels, got {}",
            clip.channels()
        )));
    }
    let k = draw_merge_count(rng);
    if k == 0 {
        return Ok(clip.clone());
    }
    let chosen = rng.choose_distinct(5, k);
    merge_channels(clip, &chosen)
}

/// Replace the chosen channels (sorted indices) by their linear-magnitude sum.
pub fn merge_channels(clip: &DemixedClip, chosen: &[usize]) -> Result<DemixedClip> {
    let (t, c, f) = (clip.frames(), clip.channels(), clip.mel_bins());
    debug_assert!(chosen.windows(2).all(|w| w[0] < w[1]));
    let keep_first = chosen[0];
    let src = clip.values.data();
    let c_out = c - chosen.len() + 1;
    let mut out = Vec::with_capacity(t * c_out * f);
    let mut names = Vec::with_capacity(c_out);
    for ch in 0..c {
        if ch == keep_first {
            names.push(
                chosen
                    .iter()
                    .map(|&i| clip.channel_names[i].as_str())
                    .collect::<Vec<_>>()
                    .join("&"),
            );
        } else if !chosen.contains(&ch) {
            names.push(clip.channel_names[ch].clone());
        }
    }
    for ti in 0..t {
        for ch in 0..c {
            if chosen.contains(&ch) && ch != keep_first {
                continue;
            }
            let base = (ti * c + ch) * f;
            if ch == keep_first {
                for fi in 0..f {
                    // de-log, sum, re-log
                    let linear: f64 = chosen
                        .iter()
                        .map(|&i| src[(ti * c + i) * f + fi].exp_m1())
                        .sum();
                    out.push(linear.ln_1p());
                }
            } else {
                out.extend_from_slice(&src[base..base + f]);
            }
        }
    }
    DemixedClip::new(Tensor::new(vec![t, c_out, f], out)?, clip.fps, names)
}
