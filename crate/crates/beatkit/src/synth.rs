//! Synthetic metrical data: desk-scale five-stem clips with exact
//! annotations, for training and verifying the pipeline without audio.
//!
//! The drum channel carries energy bursts at beats (stronger and wider at
//! downbeats), the bass channel holds a low-band level that changes at each
//! downbeat, and the remaining channels carry beat-uncorrelated band noise.
//! Everything is a pure function of the RNG, so a seed reproduces a clip
//! bit-for-bit.

use crate::error::Result;
use crate::model::{DemixedClip, STEM_NAMES};
use crate::rng::Rng;
use crate::targets::Annotation;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub frames: usize,
    pub fps: f64,
    pub n_mel: usize,
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// Tempi are drawn from a grid with this spacing (BPM), so a modest
    /// corpus covers every tempo class it will be evaluated on.
    pub bpm_grid: f64,
    /// Allowed meters (beats per bar).
    pub meters: Vec<usize>,
    /// Floor noise magnitude added everywhere.
    pub noise: f64,
    /// Aperiodic drum bursts per true beat; locally identical to beat
    /// bursts, so telling them apart requires checking the metrical grid.
    pub ghost_rate: f64,
    /// Probability that a beat's own burst is silent; the grid must then be
    /// filled in from neighbouring beats.
    pub drop_rate: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            frames: 2048,
            fps: 43.07,
            n_mel: 32,
            min_bpm: 90.0,
            max_bpm: 175.0,
            bpm_grid: 20.0,
            meters: vec![3, 4],
            noise: 0.03,
            ghost_rate: 0.4,
            drop_rate: 0.35,
        }
    }
}

/// Generate one clip and its exact annotation. Beat times are exactly
/// periodic at the drawn tempo; the downbeat falls on every
/// `beats_per_bar`-th beat.
pub fn synth_clip(params: &SynthParams, rng: &mut Rng) -> Result<(DemixedClip, Annotation)> {
    let t = params.frames;
    let f = params.n_mel;
    let c = 5;
    let bpm = if params.bpm_grid > 0.0 {
        let steps = ((params.max_bpm - params.min_bpm) / params.bpm_grid).floor() as usize;
        params.min_bpm + params.bpm_grid * rng.below(steps + 1) as f64
    } else {
        rng.uniform(params.min_bpm, params.max_bpm)
    };
    let meter = params.meters[rng.below(params.meters.len())];
    let period = 60.0 / bpm;
    let phase = rng.uniform(0.0, period);
    let first_pos = 1 + rng.below(meter);

    // exact beat grid
    let duration = t as f64 / params.fps;
    let mut beat_times = Vec::new();
    let mut beat_positions = Vec::new();
    let mut k = 0usize;
    loop {
        let time = phase + k as f64 * period;
        if time >= duration || ((time * params.fps).round() as usize) >= t {
            break;
        }
        beat_times.push(time);
        beat_positions.push((first_pos - 1 + k) % meter + 1);
        k += 1;
    }
    let ann = Annotation {
        beat_times,
        beat_positions,
        beats_per_bar: meter,
    };

    // magnitudes first, log(1+x) at the end
    let mut mag = vec![0.0f64; t * c * f];
    let cell = |mag: &mut Vec<f64>, ti: usize, ch: usize, fi: usize, v: f64| {
        let idx = (ti * c + ch) * f + fi;
        mag[idx] += v;
    };

    // floor noise everywhere
    for v in mag.iter_mut() {
        *v = rng.uniform(0.0, params.noise);
    }

    // the "other" stem carries a steady hiss in the band between the drum
    // mid-band and the downbeat crash, with a level quantized by tempo
    // class (super-linear steps, so classes never overlap under jitter);
    // the piano stem mirrors it at half level, keeping the cue alive when
    // channels merge. Time-averaged features read it with a linear map.
    let tempo_frac = (bpm - params.min_bpm) / (params.max_bpm - params.min_bpm + 1e-9);
    let tempo_class = (tempo_frac * 5.0).min(4.0) as usize;
    let cue_level = [0.0, 0.35, 0.8, 1.4, 2.2][tempo_class];
    let cue_lo = f / 2;
    let cue_hi = 3 * f / 4;
    for ti in 0..t {
        if cue_level > 0.0 {
            for fi in cue_lo..cue_hi {
                cell(&mut mag, ti, 4, fi, cue_level * (0.95 + 0.1 * rng.next_f64()));
                cell(&mut mag, ti, 1, fi, 0.5 * cue_level * (0.95 + 0.1 * rng.next_f64()));
            }
        }
        // faint floor so the stem is never empty
        for fi in 0..f {
            cell(&mut mag, ti, 4, fi, 0.02 * rng.next_f64());
        }
    }

    // vocal, piano: slowly wandering band energies, uncorrelated with the
    // beat grid, quiet relative to the percussion, and kept out of the top
    // quarter where the downbeat thump lives
    for &ch in &[0usize, 1] {
        let mut center = rng.uniform(0.2, 0.6) * f as f64;
        let mut level = rng.uniform(0.05, 0.3);
        let width = rng.uniform(2.0, 5.0);
        for ti in 0..t {
            center += rng.uniform(-0.3, 0.3);
            center = center.clamp(2.0, 0.72 * f as f64 - 1.0);
            level = (level + rng.uniform(-0.015, 0.015)).clamp(0.03, 0.35);
            for fi in 0..f {
                let d = (fi as f64 - center) / width;
                let bump = level * (-0.5 * d * d).exp();
                if bump > 1e-4 {
                    cell(&mut mag, ti, ch, fi, bump);
                }
            }
        }
    }

    // bass: low-band level redrawn at each downbeat
    let low_band = f / 6 + 1;
    let mut bass_level = rng.uniform(0.4, 1.6);
    let mut next_downbeat = 0usize;
    let downbeats: Vec<usize> = ann
        .beat_times
        .iter()
        .zip(&ann.beat_positions)
        .filter(|(_, &p)| p == 1)
        .map(|(&time, _)| (time * params.fps).round() as usize)
        .collect();
    for ti in 0..t {
        if next_downbeat < downbeats.len() && ti == downbeats[next_downbeat] {
            bass_level = rng.uniform(0.4, 1.6);
            next_downbeat += 1;
        }
        for fi in 0..low_band {
            let rolloff = 1.0 - fi as f64 / low_band as f64 * 0.5;
            cell(&mut mag, ti, 3, fi, bass_level * rolloff);
        }
    }

    // drum: bursts on the beat grid; downbeats add a crash in the top band,
    // away from the bass register so the cue survives channel summation.
    // A fraction of beat bursts is silent, so the grid must be completed
    // from context rather than read frame by frame.
    let mid_lo = f / 8;
    let mid_hi = f / 2;
    let top_lo = 3 * f / 4;
    for (&time, &pos) in ann.beat_times.iter().zip(&ann.beat_positions) {
        let fb = (time * params.fps).round() as usize;
        let is_down = pos == 1;
        let strength = if is_down { 5.0 } else { 3.5 };
        let dropped = rng.next_f64() < params.drop_rate;
        for (offset, decay) in [(0usize, 1.0), (1, 0.35)] {
            let ti = fb + offset;
            if ti >= t {
                continue;
            }
            if !dropped {
                for fi in mid_lo..mid_hi {
                    cell(&mut mag, ti, 2, fi, strength * decay);
                }
            }
            if is_down {
                for fi in top_lo..f {
                    cell(&mut mag, ti, 2, fi, 6.0 * decay);
                }
            }
        }
    }

    // ghost bursts: same band, same shape, off the metrical grid; the
    // model must consult neighbouring beats to reject them
    let beat_frames: Vec<usize> = ann
        .beat_times
        .iter()
        .map(|&time| (time * params.fps).round() as usize)
        .collect();
    let n_ghosts = (params.ghost_rate * beat_frames.len() as f64).round() as usize;
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < n_ghosts && attempts < n_ghosts * 40 {
        attempts += 1;
        let gf = rng.below(t);
        if beat_frames.iter().any(|&b| gf.abs_diff(b) <= 4) {
            continue;
        }
        for (offset, decay) in [(0usize, 1.0), (1, 0.35)] {
            let ti = gf + offset;
            if ti >= t {
                continue;
            }
            for fi in mid_lo..mid_hi {
                cell(&mut mag, ti, 2, fi, 3.5 * decay);
            }
        }
        placed += 1;
    }

    let values: Vec<f64> = mag.iter().map(|&x| x.ln_1p()).collect();
    let clip = DemixedClip::new(
        Tensor::new(vec![t, c, f], values)?,
        params.fps,
        STEM_NAMES.iter().map(|s| s.to_string()).collect(),
    )?;
    Ok((clip, ann))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beats_are_exactly_periodic() {
        let params = SynthParams {
            frames: 512,
            ..Default::default()
        };
        let mut rng = Rng::new(42);
        let (_, ann) = synth_clip(&params, &mut rng).unwrap();
        assert!(ann.beat_times.len() > 4);
        let period = ann.beat_times[1] - ann.beat_times[0];
        for w in ann.beat_times.windows(2) {
            assert!((w[1] - w[0] - period).abs() < 1e-12);
        }
        let bpm = 60.0 / period;
        assert!(bpm >= params.min_bpm - 1e-9 && bpm <= params.max_bpm + 1e-9);
    }

    #[test]
    fn downbeat_every_meter_beats() {
        let mut rng = Rng::new(7);
        let (_, ann) = synth_clip(&SynthParams::default(), &mut rng).unwrap();
        let meter = ann.beats_per_bar;
        let down_idx: Vec<usize> = ann
            .beat_positions
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == 1)
            .map(|(i, _)| i)
            .collect();
        for w in down_idx.windows(2) {
            assert_eq!(w[1] - w[0], meter);
        }
        ann.validate().unwrap();
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let params = SynthParams {
            frames: 256,
            ..Default::default()
        };
        let mut a = Rng::new(123);
        let mut b = Rng::new(123);
        let (clip_a, ann_a) = synth_clip(&params, &mut a).unwrap();
        let (clip_b, ann_b) = synth_clip(&params, &mut b).unwrap();
        assert_eq!(clip_a.values.data(), clip_b.values.data());
        assert_eq!(ann_a, ann_b);
    }

    #[test]
    fn drum_channel_is_loud_at_beats() {
        let mut rng = Rng::new(9);
        let params = SynthParams {
            frames: 512,
            ..Default::default()
        };
        let (clip, ann) = synth_clip(&params, &mut rng).unwrap();
        let f = clip.mel_bins();
        let beat_frames: Vec<usize> = ann
            .beat_times
            .iter()
            .map(|&t| (t * params.fps).round() as usize)
            .collect();
        let drum_energy = |ti: usize| -> f64 {
            (0..f)
                .map(|fi| clip.values.data()[(ti * 5 + 2) * f + fi])
                .sum()
        };
        let on: f64 =
            beat_frames.iter().map(|&b| drum_energy(b)).sum::<f64>() / beat_frames.len() as f64;
        let off_frames: Vec<usize> = (0..params.frames)
            .filter(|ti| beat_frames.iter().all(|&b| ti.abs_diff(b) > 2))
            .collect();
        let off: f64 =
            off_frames.iter().map(|&x| drum_energy(x)).sum::<f64>() / off_frames.len() as f64;
        assert!(on > 3.0 * off, "beat frames should stand out: {on} vs {off}");
    }
}
