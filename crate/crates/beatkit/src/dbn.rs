//! Bar-pointer dynamic Bayesian network decoding.
//!
//! Hidden states encode (meter, beat interval in frames, position within
//! the bar). Position advances deterministically one frame at a time; the
//! tempo (beat interval) may change only when the bar pointer wraps, with an
//! exponential penalty on relative tempo change. The first
//! `1/observation_lambda` fraction of each beat interval emits beat (or, for
//! the first beat of the bar, downbeat) observation density; the rest emit
//! the non-beat density. Viterbi decoding picks the max-probability path
//! and emits a beat wherever the path enters a beat window.

use crate::error::{Error, Result};
use crate::model::ActivationTrack;

/// Emission probabilities are floored here before taking logs.
pub const EMISSION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct DbnConfig {
    pub min_bpm: f64,
    pub max_bpm: f64,
    /// Candidate meters (beats per bar).
    pub beats_per_bar: Vec<usize>,
    /// Fraction of each beat interval that emits beat density is 1/lambda.
    pub observation_lambda: usize,
    /// Sharpness of the tempo-change penalty at bar boundaries.
    pub transition_lambda: f64,
    /// Leading/trailing frames with beat activation below this are trimmed.
    pub threshold: f64,
    pub fps: f64,
}

impl Default for DbnConfig {
    fn default() -> Self {
        DbnConfig {
            min_bpm: 55.0,
            max_bpm: 215.0,
            beats_per_bar: vec![3, 4],
            observation_lambda: 6,
            transition_lambda: 100.0,
            threshold: 0.2,
            fps: 43.07,
        }
    }
}

impl DbnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_bpm <= 0.0 || self.min_bpm >= self.max_bpm {
            return Err(Error::Config(format!(
                "need 0 < min_bpm < max_bpm, got {} and {}",
                self.min_bpm, self.max_bpm
            )));
        }
        if self.beats_per_bar.is_empty() || self.beats_per_bar.contains(&0) {
            return Err(Error::Config("beats_per_bar must list meters >= 1".into()));
        }
        if self.observation_lambda < 1 {
            return Err(Error::Config("observation_lambda must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!(
                "threshold {} outside [0, 1)",
                self.threshold
            )));
        }
        if self.fps <= 0.0 {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        Ok(())
    }

    /// Beat interval range in frames implied by the BPM bounds.
    pub fn interval_range(&self) -> Result<(usize, usize)> {
        let lo = (self.fps * 60.0 / self.max_bpm).ceil() as usize;
        let hi = (self.fps * 60.0 / self.min_bpm).floor() as usize;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "empty beat interval range [{lo}, {hi}] at {} fps",
                self.fps
            )));
        }
        Ok((lo, hi))
    }
}

/// What a state emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateClass {
    /// Beat window of the bar's first beat.
    Downbeat,
    /// Beat window of any other beat.
    Beat,
    /// Outside every beat window.
    NonBeat,
}

/// One (meter, interval) block of `meter * interval` position states.
#[derive(Debug, Clone, Copy)]
pub struct Block {
    pub meter: usize,
    pub interval: usize,
    /// Index of the block's position-0 state.
    pub offset: usize,
}

/// Flattened bar-pointer state space.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub blocks: Vec<Block>,
    n_states: usize,
    /// Per-state bar position 0..meter*interval.
    position: Vec<u32>,
    interval: Vec<u32>,
    meter: Vec<u32>,
    block_of: Vec<u32>,
    class: Vec<StateClass>,
    observation_lambda: usize,
}

/// Enumerate (meter, interval) blocks and their cyclic position chains.
pub fn build_state_space(cfg: &DbnConfig) -> Result<StateSpace> {
    cfg.validate()?;
    let (lo, hi) = cfg.interval_range()?;
    let mut blocks = Vec::new();
    let mut offset = 0usize;
    for &meter in &cfg.beats_per_bar {
        for interval in lo..=hi {
            blocks.push(Block {
                meter,
                interval,
                offset,
            });
            offset += meter * interval;
        }
    }
    let n_states = offset;
    let mut position = Vec::with_capacity(n_states);
    let mut interval_v = Vec::with_capacity(n_states);
    let mut meter_v = Vec::with_capacity(n_states);
    let mut block_of = Vec::with_capacity(n_states);
    let mut class = Vec::with_capacity(n_states);
    for (bi, b) in blocks.iter().enumerate() {
        for p in 0..b.meter * b.interval {
            position.push(p as u32);
            interval_v.push(b.interval as u32);
            meter_v.push(b.meter as u32);
            block_of.push(bi as u32);
            let pos_in_beat = p % b.interval;
            let in_window =
                (pos_in_beat as f64) < b.interval as f64 / cfg.observation_lambda as f64;
            class.push(if !in_window {
                StateClass::NonBeat
            } else if p / b.interval == 0 {
                StateClass::Downbeat
            } else {
                StateClass::Beat
            });
        }
    }
    Ok(StateSpace {
        blocks,
        n_states,
        position,
        interval: interval_v,
        meter: meter_v,
        block_of,
        class,
        observation_lambda: cfg.observation_lambda,
    })
}

impl StateSpace {
    pub fn len(&self) -> usize {
        self.n_states
    }

    pub fn is_empty(&self) -> bool {
        self.n_states == 0
    }

    pub fn position(&self, s: usize) -> usize {
        self.position[s] as usize
    }

    pub fn interval(&self, s: usize) -> usize {
        self.interval[s] as usize
    }

    pub fn meter(&self, s: usize) -> usize {
        self.meter[s] as usize
    }

    pub fn class(&self, s: usize) -> StateClass {
        self.class[s]
    }

    /// 0-based beat index within the bar.
    pub fn beat_index(&self, s: usize) -> usize {
        self.position(s) / self.interval(s)
    }

    /// Frames into the current beat.
    pub fn pos_in_beat(&self, s: usize) -> usize {
        self.position(s) % self.interval(s)
    }

    /// Log transition probability between two states.
    ///
    /// Within a bar the position advances by exactly one frame at fixed
    /// tempo (probability 1). When the bar pointer wraps, the tempo may
    /// switch with probability proportional to
    /// `exp(-lambda * |interval_to/interval_from - 1|)`, normalized over
    /// reachable intervals of the same meter. Everything else is `-inf`.
    pub fn transition_logprob(&self, from: usize, to: usize, cfg: &DbnConfig) -> f64 {
        if self.meter(from) != self.meter(to) {
            return f64::NEG_INFINITY;
        }
        let bar_len = self.meter(from) * self.interval(from);
        if self.position(from) + 1 < bar_len {
            // mid-bar: same block, position + 1
            if self.block_of[from] == self.block_of[to]
                && self.position(to) == self.position(from) + 1
            {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        } else {
            // wrap: any tempo of the same meter, landing on position 0
            if self.position(to) != 0 {
                return f64::NEG_INFINITY;
            }
            let tau_from = self.interval(from) as f64;
            let tau_to = self.interval(to) as f64;
            let weight = -cfg.transition_lambda * (tau_to / tau_from - 1.0).abs();
            // normalize over every reachable destination tempo
            let z: f64 = self
                .blocks
                .iter()
                .filter(|b| b.meter == self.meter(from))
                .map(|b| {
                    (-cfg.transition_lambda * (b.interval as f64 / tau_from - 1.0).abs()).exp()
                })
                .sum();
            weight - z.ln()
        }
    }

    /// Log emission probability of `state` given the frame's activations.
    ///
    /// Downbeat windows emit the downbeat activation; other beat windows
    /// emit `max(beat - downbeat, floor)`; non-beat states emit
    /// `(1 - beat) / (lambda - 1)`. All are floored before the log.
    pub fn observation_logprob(&self, state: usize, beat_act: f64, downbeat_act: f64) -> f64 {
        let e = frame_emissions(beat_act, downbeat_act, self.observation_lambda);
        match self.class(state) {
            StateClass::Downbeat => e.downbeat,
            StateClass::Beat => e.beat,
            StateClass::NonBeat => e.non_beat,
        }
    }
}

/// Per-frame log emission densities for the three state classes.
#[derive(Debug, Clone, Copy)]
pub struct FrameEmissions {
    pub downbeat: f64,
    pub beat: f64,
    pub non_beat: f64,
}

pub fn frame_emissions(beat_act: f64, downbeat_act: f64, lambda: usize) -> FrameEmissions {
    let down = downbeat_act.max(EMISSION_FLOOR);
    let beat = (beat_act - downbeat_act).max(EMISSION_FLOOR);
    let non = if lambda >= 2 {
        ((1.0 - beat_act) / (lambda as f64 - 1.0)).max(EMISSION_FLOOR)
    } else {
        EMISSION_FLOOR
    };
    FrameEmissions {
        downbeat: down.ln(),
        beat: beat.ln(),
        non_beat: non.ln(),
    }
}

/// A decoded beat: time in seconds and 1-based position in bar.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeatEvent {
    pub time: f64,
    pub position: usize,
}

/// Ordered decoded beats.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BeatSequence {
    pub events: Vec<BeatEvent>,
    pub fps: f64,
}

impl BeatSequence {
    pub fn beat_times(&self) -> Vec<f64> {
        self.events.iter().map(|e| e.time).collect()
    }

    pub fn downbeat_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.position == 1)
            .map(|e| e.time)
            .collect()
    }
}

/// Max-log-probability state path over per-frame emissions, with a uniform
/// initial distribution. Ties break toward the smaller state index, so
/// decoding is reproducible bit-for-bit.
pub fn decode_path(
    space: &StateSpace,
    emissions: &[FrameEmissions],
    cfg: &DbnConfig,
) -> Vec<u32> {
    let n = space.len();
    let t_len = emissions.len();
    if t_len == 0 || n == 0 {
        return Vec::new();
    }
    // precompute per-meter wrap transition tables between interval blocks
    // wrap_log[dst_block] = list of (src_block_last_state_offset_delta, logprob)
    let emis = |s: usize, e: &FrameEmissions| -> f64 {
        match space.class[s] {
            StateClass::Downbeat => e.downbeat,
            StateClass::Beat => e.beat,
            StateClass::NonBeat => e.non_beat,
        }
    };

    let mut wrap_sources: Vec<Vec<(usize, f64)>> = Vec::with_capacity(space.blocks.len());
    for dst in &space.blocks {
        let mut preds = Vec::new();
        // normalizer per source block
        for src in &space.blocks {
            if src.meter != dst.meter {
                continue;
            }
            let tau_from = src.interval as f64;
            let weight =
                -cfg.transition_lambda * (dst.interval as f64 / tau_from - 1.0).abs();
            let z: f64 = space
                .blocks
                .iter()
                .filter(|b| b.meter == src.meter)
                .map(|b| {
                    (-cfg.transition_lambda * (b.interval as f64 / tau_from - 1.0).abs()).exp()
                })
                .sum();
            let last_state = src.offset + src.meter * src.interval - 1;
            preds.push((last_state, weight - z.ln()));
        }
        preds.sort_by_key(|&(s, _)| s);
        wrap_sources.push(preds);
    }

    let uniform = -(n as f64).ln();
    let mut delta: Vec<f64> = (0..n).map(|s| uniform + emis(s, &emissions[0])).collect();
    let mut next = vec![0.0f64; n];
    let mut psi = vec![0u32; t_len * n];

    for (t, e) in emissions.iter().enumerate().skip(1) {
        for (bi, b) in space.blocks.iter().enumerate() {
            let bar_len = b.meter * b.interval;
            // position 0: choose among wrap predecessors, smaller index wins ties
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0u32;
            for &(src, logp) in &wrap_sources[bi] {
                let cand = delta[src] + logp;
                if cand > best {
                    best = cand;
                    arg = src as u32;
                }
            }
            next[b.offset] = best + emis(b.offset, e);
            psi[t * n + b.offset] = arg;
            // positions 1..: deterministic advance from s-1
            for p in 1..bar_len {
                let s = b.offset + p;
                next[s] = delta[s - 1] + emis(s, e);
                psi[t * n + s] = (s - 1) as u32;
            }
        }
        std::mem::swap(&mut delta, &mut next);
    }

    // final argmax, smaller index wins ties
    let mut best_state = 0usize;
    let mut best = f64::NEG_INFINITY;
    for (s, &d) in delta.iter().enumerate() {
        if d > best {
            best = d;
            best_state = s;
        }
    }
    let mut path = vec![0u32; t_len];
    path[t_len - 1] = best_state as u32;
    for t in (1..t_len).rev() {
        path[t - 1] = psi[t * n + path[t] as usize];
    }
    path
}

/// Decode a beat/downbeat sequence from raw activations.
///
/// Leading and trailing frames whose beat activation falls below the
/// threshold are trimmed before decoding; if nothing survives, the result
/// is empty. A beat is emitted at each frame where the path enters a beat
/// window (`pos_in_beat == 0`), tagged with its 1-based position in bar.
pub fn viterbi_decode(acts: &ActivationTrack, cfg: &DbnConfig) -> Result<BeatSequence> {
    cfg.validate()?;
    if acts.beat.len() != acts.downbeat.len() {
        return Err(Error::Shape("beat/downbeat activation lengths differ".into()));
    }
    if acts.beat.is_empty() {
        return Err(Error::Contract("cannot decode an empty activation track".into()));
    }
    if acts
        .beat
        .iter()
        .chain(&acts.downbeat)
        .any(|&p| !(0.0..=1.0).contains(&p))
    {
        return Err(Error::Contract("activations must lie in [0, 1]".into()));
    }

    let first = acts.beat.iter().position(|&p| p >= cfg.threshold);
    let last = acts.beat.iter().rposition(|&p| p >= cfg.threshold);
    let (first, last) = match (first, last) {
        (Some(f), Some(l)) => (f, l),
        _ => {
            return Ok(BeatSequence {
                events: Vec::new(),
                fps: acts.fps,
            })
        }
    };

    let space = build_state_space(cfg)?;
    let emissions: Vec<FrameEmissions> = (first..=last)
        .map(|t| frame_emissions(acts.beat[t], acts.downbeat[t], cfg.observation_lambda))
        .collect();
    let path = decode_path(&space, &emissions, cfg);

    let mut events = Vec::new();
    for (idx, &s) in path.iter().enumerate() {
        let s = s as usize;
        if space.pos_in_beat(s) == 0 {
            events.push(BeatEvent {
                time: (first + idx) as f64 / acts.fps,
                position: space.beat_index(s) + 1,
            });
        }
    }
    Ok(BeatSequence {
        events,
        fps: acts.fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DbnConfig {
        // fps 10, 100-150 BPM -> intervals 4..=6, meter 2: 2*(4+5+6) = 30 states
        DbnConfig {
            min_bpm: 100.0,
            max_bpm: 150.0,
            beats_per_bar: vec![2],
            observation_lambda: 4,
            transition_lambda: 30.0,
            threshold: 0.0,
            fps: 10.0,
        }
    }

    #[test]
    fn interval_arithmetic_example() {
        // fps=100, 60-120 BPM -> intervals [50, 100], 51 tempo blocks per meter
        let cfg = DbnConfig {
            min_bpm: 60.0,
            max_bpm: 120.0,
            beats_per_bar: vec![3, 4],
            fps: 100.0,
            ..Default::default()
        };
        assert_eq!(cfg.interval_range().unwrap(), (50, 100));
        let space = build_state_space(&cfg).unwrap();
        let per_meter = space.blocks.iter().filter(|b| b.meter == 3).count();
        assert_eq!(per_meter, 51);
        // state count equals sum over meters and intervals of B * tau
        let expect: usize = [3usize, 4]
            .iter()
            .map(|&b| (50..=100).map(|tau| b * tau).sum::<usize>())
            .sum();
        assert_eq!(space.len(), expect);
    }

    #[test]
    fn single_tempo_space() {
        let cfg = DbnConfig {
            min_bpm: 119.0,
            max_bpm: 121.0,
            beats_per_bar: vec![4],
            fps: 100.0,
            ..Default::default()
        };
        // interval range collapses to tau = 50
        assert_eq!(cfg.interval_range().unwrap(), (50, 50));
        let space = build_state_space(&cfg).unwrap();
        assert_eq!(space.blocks.len(), 1);
        assert_eq!(space.len(), 200);
    }

    #[test]
    fn empty_interval_range_is_config_error() {
        // fps*60/max = 3.43 -> ceil 4; fps*60/min = 3.53 -> floor 3: empty
        let cfg = DbnConfig {
            min_bpm: 170.0,
            max_bpm: 175.0,
            fps: 10.0,
            ..Default::default()
        };
        assert!(matches!(build_state_space(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn transition_rules() {
        let cfg = small_cfg();
        let space = build_state_space(&cfg).unwrap();
        // mid-bar: position advances with probability 1
        let b0 = space.blocks[0];
        assert_eq!(space.transition_logprob(b0.offset, b0.offset + 1, &cfg), 0.0);
        // mid-bar tempo change is forbidden
        let b1 = space.blocks[1];
        assert_eq!(
            space.transition_logprob(b0.offset, b1.offset + 1, &cfg),
            f64::NEG_INFINITY
        );
        // mid-bar stays put is forbidden
        assert_eq!(
            space.transition_logprob(b0.offset, b0.offset, &cfg),
            f64::NEG_INFINITY
        );
        // wraps renormalize over destinations
        let last0 = b0.offset + b0.meter * b0.interval - 1;
        let mut total = 0.0;
        for b in &space.blocks {
            let lp = space.transition_logprob(last0, b.offset, &cfg);
            assert!(lp > f64::NEG_INFINITY);
            total += lp.exp();
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrap_tempo_change_ratio_matches_exponential_rule() {
        // p(same tempo) / p(tempo ratio 1.25) = exp(lambda * 0.25)
        let cfg = DbnConfig {
            min_bpm: 100.0,
            max_bpm: 151.0,
            beats_per_bar: vec![2],
            transition_lambda: 100.0,
            fps: 10.0,
            ..small_cfg()
        };
        let space = build_state_space(&cfg).unwrap();
        // intervals 4..=6: from tau=4 to tau=4 vs tau=5 (ratio 1.25)
        let b4 = space.blocks.iter().find(|b| b.interval == 4).unwrap();
        let b5 = space.blocks.iter().find(|b| b.interval == 5).unwrap();
        let last4 = b4.offset + b4.meter * b4.interval - 1;
        let same = space.transition_logprob(last4, b4.offset, &cfg);
        let change = space.transition_logprob(last4, b5.offset, &cfg);
        assert!((same - change - 100.0 * 0.25).abs() < 1e-9);
    }

    #[test]
    fn observation_ordering() {
        let cfg = small_cfg();
        let space = build_state_space(&cfg).unwrap();
        let down_state = (0..space.len())
            .find(|&s| space.class(s) == StateClass::Downbeat)
            .unwrap();
        let beat_state = (0..space.len())
            .find(|&s| space.class(s) == StateClass::Beat)
            .unwrap();
        let non_state = (0..space.len())
            .find(|&s| space.class(s) == StateClass::NonBeat)
            .unwrap();
        // beat_act = 1 favors beat windows
        let hi_beat = space.observation_logprob(beat_state, 1.0, 0.0);
        let hi_non = space.observation_logprob(non_state, 1.0, 0.0);
        assert!(hi_beat > hi_non);
        // beat_act = 0 favors non-beat states
        let lo_beat = space.observation_logprob(beat_state, 0.0, 0.0);
        let lo_non = space.observation_logprob(non_state, 0.0, 0.0);
        assert!(lo_non > lo_beat);
        // hand-evaluated ratios at beat = 0.9, downbeat = 0.6, lambda = 4
        let e_down = space.observation_logprob(down_state, 0.9, 0.6);
        let e_beat = space.observation_logprob(beat_state, 0.9, 0.6);
        let e_non = space.observation_logprob(non_state, 0.9, 0.6);
        assert!((e_down.exp() - 0.6).abs() < 1e-12);
        assert!((e_beat.exp() - (0.9 - 0.6)).abs() < 1e-12);
        assert!((e_non.exp() - (1.0 - 0.9) / 3.0).abs() < 1e-12);
    }

    /// Exhaustive maximum path over all legal state sequences.
    fn brute_force_path(
        space: &StateSpace,
        emissions: &[FrameEmissions],
        cfg: &DbnConfig,
    ) -> (Vec<usize>, f64) {
        let n = space.len();
        let t_len = emissions.len();
        let emis = |s: usize, t: usize| space.observation_logprob_raw(emissions, s, t);
        let mut best_path = Vec::new();
        let mut best_score = f64::NEG_INFINITY;
        // DFS with explicit successor enumeration
        fn successors(space: &StateSpace, s: usize, cfg: &DbnConfig) -> Vec<(usize, f64)> {
            let mut out = Vec::new();
            for to in 0..space.len() {
                let lp = space.transition_logprob(s, to, cfg);
                if lp > f64::NEG_INFINITY {
                    out.push((to, lp));
                }
            }
            out
        }
        let uniform = -(n as f64).ln();
        let mut stack: Vec<(Vec<usize>, f64)> = (0..n)
            .map(|s| (vec![s], uniform + emis(s, 0)))
            .collect();
        while let Some((path, score)) = stack.pop() {
            if path.len() == t_len {
                if score > best_score
                    || (score == best_score && path < best_path)
                {
                    best_score = score;
                    best_path = path;
                }
                continue;
            }
            let t = path.len();
            for (to, lp) in successors(space, *path.last().unwrap(), cfg) {
                let mut next = path.clone();
                next.push(to);
                stack.push((next, score + lp + emis(to, t)));
            }
        }
        (best_path, best_score)
    }

    impl StateSpace {
        fn observation_logprob_raw(
            &self,
            emissions: &[FrameEmissions],
            s: usize,
            t: usize,
        ) -> f64 {
            match self.class(s) {
                StateClass::Downbeat => emissions[t].downbeat,
                StateClass::Beat => emissions[t].beat,
                StateClass::NonBeat => emissions[t].non_beat,
            }
        }
    }

    #[test]
    fn viterbi_equals_brute_force_enumeration() {
        let mut rng = crate::rng::Rng::new(99);
        for case in 0..30 {
            let cfg = DbnConfig {
                min_bpm: 100.0,
                max_bpm: rng.uniform(130.0, 160.0),
                beats_per_bar: vec![2],
                observation_lambda: 3 + rng.below(3),
                transition_lambda: rng.uniform(5.0, 60.0),
                threshold: 0.0,
                fps: 10.0,
            };
            let space = build_state_space(&cfg).unwrap();
            assert!(space.len() <= 200, "test wants small spaces");
            let t_len = 5 + rng.below(8); // short: enumeration is exponential
            let emissions: Vec<FrameEmissions> = (0..t_len)
                .map(|_| {
                    let b = rng.uniform(0.01, 0.99);
                    let d = rng.uniform(0.0, b);
                    frame_emissions(b, d, cfg.observation_lambda)
                })
                .collect();
            let fast = decode_path(&space, &emissions, &cfg);
            let (slow, slow_score) = brute_force_path(&space, &emissions, &cfg);
            let fast_score: f64 = {
                let mut score = -(space.len() as f64).ln()
                    + space.observation_logprob_raw(&emissions, fast[0] as usize, 0);
                for t in 1..t_len {
                    score += space.transition_logprob(fast[t - 1] as usize, fast[t] as usize, &cfg)
                        + space.observation_logprob_raw(&emissions, fast[t] as usize, t);
                }
                score
            };
            assert!(
                (fast_score - slow_score).abs() < 1e-9,
                "case {case}: viterbi {fast_score} vs brute force {slow_score}"
            );
            let fast_usize: Vec<usize> = fast.iter().map(|&s| s as usize).collect();
            assert_eq!(fast_usize, slow, "case {case}: paths differ");
        }
    }

    /// Needle activations: high exactly at the impulse frames.
    fn impulse_track(t_len: usize, period: usize, meter: usize, fps: f64) -> ActivationTrack {
        let mut beat = vec![0.02; t_len];
        let mut down = vec![0.01; t_len];
        let mut k = 0;
        let mut frame = 0;
        while frame < t_len {
            beat[frame] = 0.95;
            if k % meter == 0 {
                down[frame] = 0.9;
            }
            k += 1;
            frame += period;
        }
        ActivationTrack {
            beat,
            downbeat: down,
            tempo: {
                let mut d = vec![0.0; 300];
                d[120] = 1.0;
                d
            },
            fps,
        }
    }

    #[test]
    fn impulse_train_decodes_to_exact_beats() {
        // single-tempo space, impulses exactly tau apart
        let cfg = DbnConfig {
            min_bpm: 119.0,
            max_bpm: 121.0,
            beats_per_bar: vec![4],
            observation_lambda: 6,
            transition_lambda: 100.0,
            threshold: 0.2,
            fps: 100.0,
        };
        let tau = 50;
        let acts = impulse_track(20 * tau, tau, 4, 100.0);
        let beats = viterbi_decode(&acts, &cfg).unwrap();
        let expect: Vec<f64> = (0..20).map(|k| (k * tau) as f64 / 100.0).collect();
        let got = beats.beat_times();
        assert_eq!(got.len(), expect.len(), "got {got:?}");
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-9);
        }
    }

    /// Bump activations shaped like the widened training targets; these
    /// force the beat window to align with the bump.
    fn bump_track(t_len: usize, period: usize, meter: usize, fps: f64) -> ActivationTrack {
        let mut beat = vec![0.02; t_len];
        let mut down = vec![0.01; t_len];
        let spread = |buf: &mut Vec<f64>, center: usize| {
            for (off, v) in [(-2isize, 0.3), (-1, 0.55), (0, 0.95), (1, 0.55), (2, 0.3)] {
                let idx = center as isize + off;
                if idx >= 0 && (idx as usize) < t_len {
                    buf[idx as usize] = f64::max(buf[idx as usize], v);
                }
            }
        };
        let mut k = 0;
        let mut frame = 0;
        while frame < t_len {
            spread(&mut beat, frame);
            if k % meter == 0 {
                spread(&mut down, frame);
            }
            k += 1;
            frame += period;
        }
        ActivationTrack {
            beat,
            downbeat: down,
            tempo: {
                let mut d = vec![0.0; 300];
                d[120] = 1.0;
                d
            },
            fps,
        }
    }

    #[test]
    fn downbeat_positions_cycle_through_the_meter() {
        let cfg = DbnConfig {
            min_bpm: 115.0,
            max_bpm: 125.0,
            beats_per_bar: vec![4],
            observation_lambda: 6,
            transition_lambda: 100.0,
            threshold: 0.2,
            fps: 100.0,
        };
        let acts = bump_track(4000, 50, 4, 100.0);
        let beats = viterbi_decode(&acts, &cfg).unwrap();
        assert!(beats.events.len() >= 8);
        // positions cycle 1,2,3,4
        for w in beats.events.windows(2) {
            let expect = w[0].position % 4 + 1;
            assert_eq!(w[1].position, expect);
        }
        // downbeats land near the downbeat bumps (every 4th impulse); the
        // window may enter a couple of frames before the peak
        let down = beats.downbeat_times();
        assert!(!down.is_empty());
        for t in &down {
            let frame = (t * 100.0).round() as i64;
            let nearest = ((frame + 100) / 200) * 200;
            assert!(
                (frame - nearest).abs() <= 3,
                "downbeat at frame {frame}, nearest peak {nearest}"
            );
        }
    }

    #[test]
    fn all_below_threshold_is_empty_not_error() {
        let acts = ActivationTrack {
            beat: vec![0.05; 100],
            downbeat: vec![0.01; 100],
            tempo: {
                let mut d = vec![0.0; 300];
                d[0] = 1.0;
                d
            },
            fps: 50.0,
        };
        let beats = viterbi_decode(&acts, &DbnConfig::default()).unwrap();
        assert!(beats.events.is_empty());
    }

    #[test]
    fn trimming_offsets_beat_times() {
        let cfg = DbnConfig {
            min_bpm: 119.0,
            max_bpm: 121.0,
            beats_per_bar: vec![4],
            observation_lambda: 6,
            transition_lambda: 100.0,
            threshold: 0.2,
            fps: 100.0,
        };
        let tau = 50;
        let base = bump_track(10 * tau, tau, 4, 100.0);
        // prepend 100 silent frames; note the first bump's left shoulder
        // (0.3 at local frame -2) stays below the 0.2 threshold shift
        let mut beat = vec![0.01; 100];
        beat.extend_from_slice(&base.beat);
        let mut down = vec![0.005; 100];
        down.extend_from_slice(&base.downbeat);
        let acts = ActivationTrack {
            beat,
            downbeat: down,
            tempo: base.tempo.clone(),
            fps: 100.0,
        };
        let beats = viterbi_decode(&acts, &cfg).unwrap();
        let times = beats.beat_times();
        assert!(times.len() >= 8);
        // nothing decodes inside the trimmed silence, and every beat sits on
        // the 1.0 + k*0.5 grid (the path may start mid-window and skip the
        // boundary beat)
        for &t in &times {
            assert!(t >= 0.97, "beat at {t} inside trimmed region");
            // the window may enter up to (l_win - bump) frames early: 60 ms
            // here, inside the 70 ms evaluation tolerance
            let k = ((t - 1.0) / 0.5).round();
            assert!(
                (t - 1.0 - 0.5 * k).abs() <= 0.07,
                "beat at {t} off the expected grid"
            );
        }
        for w in times.windows(2) {
            assert!((w[1] - w[0] - 0.5).abs() <= 0.07);
        }
    }

    #[test]
    fn decoded_intervals_lie_within_bpm_bounds() {
        let mut rng = crate::rng::Rng::new(5);
        let cfg = DbnConfig {
            min_bpm: 80.0,
            max_bpm: 160.0,
            beats_per_bar: vec![3, 4],
            observation_lambda: 6,
            transition_lambda: 100.0,
            threshold: 0.1,
            fps: 50.0,
        };
        // noisy activations still decode to legal intervals
        let t_len = 600;
        let acts = ActivationTrack {
            beat: (0..t_len).map(|_| rng.uniform(0.0, 1.0)).collect(),
            downbeat: (0..t_len).map(|_| rng.uniform(0.0, 0.3)).collect(),
            tempo: {
                let mut d = vec![0.0; 300];
                d[100] = 1.0;
                d
            },
            fps: 50.0,
        };
        let beats = viterbi_decode(&acts, &cfg).unwrap();
        for w in beats.beat_times().windows(2) {
            let bpm = 60.0 / (w[1] - w[0]);
            assert!(
                bpm >= cfg.min_bpm - 1e-9 && bpm <= cfg.max_bpm + 26.0,
                "interval bpm {bpm}"
            );
        }
    }

    #[test]
    fn per_frame_constant_log_shift_never_changes_the_path() {
        let mut rng = crate::rng::Rng::new(17);
        let cfg = small_cfg();
        let space = build_state_space(&cfg).unwrap();
        let t_len = 40;
        let base: Vec<FrameEmissions> = (0..t_len)
            .map(|_| {
                let b = rng.uniform(0.05, 0.95);
                let d = rng.uniform(0.0, b);
                frame_emissions(b, d, cfg.observation_lambda)
            })
            .collect();
        let path_a = decode_path(&space, &base, &cfg);
        // renormalize emissions per frame: shift all classes by a constant
        let shifted: Vec<FrameEmissions> = base
            .iter()
            .map(|e| {
                let c = rng.uniform(-3.0, 3.0);
                FrameEmissions {
                    downbeat: e.downbeat + c,
                    beat: e.beat + c,
                    non_beat: e.non_beat + c,
                }
            })
            .collect();
        let path_b = decode_path(&space, &shifted, &cfg);
        assert_eq!(path_a, path_b);
    }
}
