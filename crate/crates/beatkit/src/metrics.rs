//! Beat and downbeat evaluation metrics.
//!
//! F-measure uses one-to-one matching inside a +-70 ms window. CMLt/AMLt
//! follow the standard continuity-based evaluation: an estimate is correct
//! when both its phase and its period stay within 17.5% of the local
//! inter-annotation interval, and continuity groups correct estimates into
//! segments. AMLt additionally accepts double, half (both phases), and
//! offbeat variants of the reference.

use crate::error::{Error, Result};

/// Default F-measure matching window in seconds.
pub const F_MEASURE_TOLERANCE: f64 = 0.070;

/// Continuity tolerance as a fraction of the inter-annotation interval.
pub const CONTINUITY_TOLERANCE: f64 = 0.175;

/// Hit/miss bookkeeping behind an F-measure score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MatchCounts {
    pub hits: usize,
    pub false_positives: usize,
    pub misses: usize,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        if self.hits + self.false_positives == 0 {
            0.0
        } else {
            self.hits as f64 / (self.hits + self.false_positives) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.hits + self.misses == 0 {
            0.0
        } else {
            self.hits as f64 / (self.hits + self.misses) as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Greedy one-to-one matching of ascending event lists within `tol` seconds.
pub fn match_events(est: &[f64], reference: &[f64], tol: f64) -> MatchCounts {
    let mut hits = 0usize;
    let (mut i, mut j) = (0usize, 0usize);
    while i < est.len() && j < reference.len() {
        if (est[i] - reference[j]).abs() <= tol {
            hits += 1;
            i += 1;
            j += 1;
        } else if est[i] < reference[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    MatchCounts {
        hits,
        false_positives: est.len() - hits,
        misses: reference.len() - hits,
    }
}

/// F-measure of estimated vs reference times within `tol` seconds.
/// Both empty scores 1; exactly one empty scores 0.
pub fn f_measure(est: &[f64], reference: &[f64], tol: f64) -> f64 {
    if est.is_empty() && reference.is_empty() {
        return 1.0;
    }
    if est.is_empty() || reference.is_empty() {
        return 0.0;
    }
    match_events(est, reference, tol).f_measure()
}

/// Index of the reference beat nearest to `t`.
fn nearest(reference: &[f64], t: f64) -> usize {
    match reference.binary_search_by(|r| r.partial_cmp(&t).unwrap()) {
        Ok(i) => i,
        Err(i) => {
            if i == 0 {
                0
            } else if i >= reference.len() {
                reference.len() - 1
            } else if (reference[i] - t).abs() < (t - reference[i - 1]).abs() {
                i
            } else {
                i - 1
            }
        }
    }
}

/// Total fraction of estimates inside continuously-correct segments,
/// against one reference variant. Needs >= 2 beats on both sides.
fn continuity_fraction(est: &[f64], reference: &[f64]) -> f64 {
    if est.len() < 2 || reference.len() < 2 {
        return 0.0;
    }
    let ref_interval = |j: usize| -> f64 {
        if j == 0 {
            reference[1] - reference[0]
        } else {
            reference[j] - reference[j - 1]
        }
    };
    let est_interval = |m: usize| -> f64 {
        if m == 0 {
            est[1] - est[0]
        } else {
            est[m] - est[m - 1]
        }
    };
    let mut correct = vec![false; est.len()];
    for (m, &b) in est.iter().enumerate() {
        let j = nearest(reference, b);
        let iv = ref_interval(j);
        let phase_ok = (b - reference[j]).abs() < CONTINUITY_TOLERANCE * iv;
        let period_ok = (est_interval(m) - iv).abs() < CONTINUITY_TOLERANCE * iv;
        correct[m] = phase_ok && period_ok;
    }
    // continuity: a correct beat only counts when its predecessor was also
    // correct (segments), except at the very start
    let mut in_segment = vec![false; est.len()];
    for m in 0..est.len() {
        in_segment[m] = correct[m] && (m == 0 || correct[m - 1]);
    }
    // total correct across all segments; segment heads re-enter after a gap
    let mut total = 0usize;
    let mut m = 0usize;
    while m < est.len() {
        if correct[m] {
            let mut len = 0;
            while m < est.len() && correct[m] {
                len += 1;
                m += 1;
            }
            total += len;
        } else {
            m += 1;
        }
    }
    total as f64 / est.len().max(reference.len()) as f64
}

/// Metrical variants of the reference accepted by AML scoring.
fn aml_variants(reference: &[f64]) -> Vec<Vec<f64>> {
    let mut variants = vec![reference.to_vec()];
    // double tempo: insert midpoints
    if reference.len() >= 2 {
        let mut double = Vec::with_capacity(reference.len() * 2 - 1);
        for w in reference.windows(2) {
            double.push(w[0]);
            double.push(0.5 * (w[0] + w[1]));
        }
        double.push(*reference.last().unwrap());
        variants.push(double);
        // offbeat: midpoints only
        let off: Vec<f64> = reference.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        variants.push(off);
    }
    // half tempo, both phases
    let half_even: Vec<f64> = reference.iter().step_by(2).cloned().collect();
    let half_odd: Vec<f64> = reference.iter().skip(1).step_by(2).cloned().collect();
    variants.push(half_even);
    variants.push(half_odd);
    variants
}

/// (CMLt, AMLt) continuity scores.
pub fn continuity_scores(est: &[f64], reference: &[f64]) -> Result<(f64, f64)> {
    if reference.len() < 2 {
        return Err(Error::Contract(format!(
            "continuity metrics need >= 2 reference beats, got {}",
            reference.len()
        )));
    }
    let cmlt = continuity_fraction(est, reference);
    let amlt = aml_variants(reference)
        .iter()
        .map(|v| continuity_fraction(est, v))
        .fold(cmlt, f64::max);
    Ok((cmlt, amlt))
}

/// All metrics for one (estimate, reference) pair of beat lists.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackScores {
    pub f_measure: f64,
    pub cmlt: f64,
    pub amlt: f64,
    pub counts: MatchCounts,
}

pub fn score_track(est: &[f64], reference: &[f64]) -> Result<TrackScores> {
    let counts = match_events(est, reference, F_MEASURE_TOLERANCE);
    let f = f_measure(est, reference, F_MEASURE_TOLERANCE);
    let (cmlt, amlt) = continuity_scores(est, reference)?;
    Ok(TrackScores {
        f_measure: f,
        cmlt,
        amlt,
        counts,
    })
}

/// Beat and downbeat scores for one track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub beat: TrackScores,
    pub downbeat: TrackScores,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, period: f64, offset: f64) -> Vec<f64> {
        (0..n).map(|i| offset + i as f64 * period).collect()
    }

    #[test]
    fn identical_sequences_score_one() {
        let r = grid(20, 0.5, 0.1);
        assert_eq!(f_measure(&r, &r, F_MEASURE_TOLERANCE), 1.0);
        let (c, a) = continuity_scores(&r, &r).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(a, 1.0);
    }

    #[test]
    fn half_detection_gives_two_thirds() {
        // ref = 10 beats, est = the first 5: P = 1, R = 0.5, F = 2/3
        let r = grid(10, 0.5, 0.0);
        let e = r[..5].to_vec();
        let counts = match_events(&e, &r, F_MEASURE_TOLERANCE);
        assert_eq!(counts.hits, 5);
        assert_eq!(counts.precision(), 1.0);
        assert_eq!(counts.recall(), 0.5);
        assert!((f_measure(&e, &r, F_MEASURE_TOLERANCE) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_beyond_tolerance_scores_zero() {
        let r = grid(10, 0.5, 0.0);
        let e: Vec<f64> = r.iter().map(|t| t + 0.1).collect();
        assert_eq!(f_measure(&e, &r, 0.07), 0.0);
    }

    #[test]
    fn empty_edge_cases() {
        assert_eq!(f_measure(&[], &[], 0.07), 1.0);
        assert_eq!(f_measure(&[1.0], &[], 0.07), 0.0);
        assert_eq!(f_measure(&[], &[1.0], 0.07), 0.0);
    }

    #[test]
    fn f_measure_symmetric_under_swap() {
        let r = grid(12, 0.45, 0.2);
        let mut e = r.clone();
        e.remove(3);
        e[5] += 0.3; // push one estimate out of tolerance
        let a = f_measure(&e, &r, 0.07);
        let b = f_measure(&r, &e, 0.07);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn double_tempo_scores_high_aml_low_cml() {
        let r = grid(20, 0.5, 0.0);
        // estimate at double tempo: ref beats interleaved with midpoints
        let mut e = Vec::new();
        for w in r.windows(2) {
            e.push(w[0]);
            e.push(0.5 * (w[0] + w[1]));
        }
        e.push(*r.last().unwrap());
        let (cmlt, amlt) = continuity_scores(&e, &r).unwrap();
        assert!(cmlt < 0.1, "cmlt {cmlt}");
        assert!(amlt > 0.9, "amlt {amlt}");
    }

    #[test]
    fn thirty_percent_period_error_scores_zero() {
        let r = grid(20, 0.5, 0.0);
        let e = grid(20, 0.65, 0.0);
        let (cmlt, amlt) = continuity_scores(&e, &r).unwrap();
        assert_eq!(cmlt, 0.0);
        assert_eq!(amlt, 0.0);
    }

    #[test]
    fn aml_never_below_cml_on_random_inputs() {
        let mut rng = crate::rng::Rng::new(33);
        for _ in 0..200 {
            let n_ref = 2 + rng.below(30);
            let n_est = rng.below(40);
            let mut r: Vec<f64> = (0..n_ref).map(|_| rng.uniform(0.0, 30.0)).collect();
            r.sort_by(|a, b| a.partial_cmp(b).unwrap());
            r.dedup_by(|a, b| (*a - *b).abs() < 1e-6);
            if r.len() < 2 {
                continue;
            }
            let mut e: Vec<f64> = (0..n_est).map(|_| rng.uniform(0.0, 30.0)).collect();
            e.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let (cmlt, amlt) = continuity_scores(&e, &r).unwrap();
            assert!(amlt >= cmlt);
            assert!((0.0..=1.0).contains(&cmlt) && (0.0..=1.0).contains(&amlt));
        }
    }

    #[test]
    fn metrics_invariant_to_global_time_shift() {
        let r = grid(15, 0.48, 0.3);
        let mut e = r.clone();
        e[4] += 0.2;
        let base = score_track(&e, &r).unwrap();
        let shift = 17.3;
        let rs: Vec<f64> = r.iter().map(|t| t + shift).collect();
        let es: Vec<f64> = e.iter().map(|t| t + shift).collect();
        let moved = score_track(&es, &rs).unwrap();
        assert!((base.f_measure - moved.f_measure).abs() < 1e-12);
        assert!((base.cmlt - moved.cmlt).abs() < 1e-12);
        assert!((base.amlt - moved.amlt).abs() < 1e-12);
    }

    #[test]
    fn continuity_needs_two_reference_beats() {
        assert!(matches!(
            continuity_scores(&[1.0, 2.0], &[1.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn continuity_breaks_at_gaps() {
        // a gap in the estimates breaks the segment but later beats count again
        let r = grid(10, 0.5, 0.0);
        let mut e = r.clone();
        e.remove(5);
        let (cmlt, _) = continuity_scores(&e, &r).unwrap();
        // beat after the gap has a doubled interval -> incorrect; the rest match
        assert!((0.7..1.0).contains(&cmlt), "cmlt {cmlt}");
    }
}
