//! Behavior of the beat evaluation metrics on constructed cases.
//!
//! Run with: cargo run --release --example evaluate_metrics

use beatkit::metrics::{continuity_scores, f_measure, F_MEASURE_TOLERANCE};

fn grid(n: usize, period: f64, offset: f64) -> Vec<f64> {
    (0..n).map(|i| offset + i as f64 * period).collect()
}

fn report(label: &str, est: &[f64], reference: &[f64]) {
    let f = f_measure(est, reference, F_MEASURE_TOLERANCE);
    let (cmlt, amlt) = continuity_scores(est, reference).unwrap();
    println!("{label:<32} F {f:.3}  CMLt {cmlt:.3}  AMLt {amlt:.3}");
}

fn main() {
    let reference = grid(40, 0.5, 0.1); // 120 BPM

    report("perfect tracking", &reference, &reference);

    let jittered: Vec<f64> = reference
        .iter()
        .enumerate()
        .map(|(i, t)| t + if i % 2 == 0 { 0.02 } else { -0.02 })
        .collect();
    report("20 ms alternating jitter", &jittered, &reference);

    let half: Vec<f64> = reference.iter().step_by(2).cloned().collect();
    report("half tempo (even beats)", &half, &reference);

    let mut double = Vec::new();
    for w in reference.windows(2) {
        double.push(w[0]);
        double.push(0.5 * (w[0] + w[1]));
    }
    double.push(*reference.last().unwrap());
    report("double tempo", &double, &reference);

    let offbeat: Vec<f64> = reference.iter().map(|t| t + 0.25).collect();
    report("offbeat (half-period shift)", &offbeat, &reference);

    let rushed = grid(40, 0.65, 0.1);
    report("30% period error", &rushed, &reference);

    let first_half = reference[..20].to_vec();
    report("first half only", &first_half, &reference);
}
