//! Bar-pointer DBN decoding on hand-built activations: a clean look at the
//! post-processor without any model in the loop.
//!
//! Run with: cargo run --release --example decode_with_dbn

use beatkit::dbn::{build_state_space, viterbi_decode, DbnConfig};
use beatkit::model::ActivationTrack;

/// Activation bumps shaped like the widened training targets.
fn bumpy_track(t_len: usize, period: usize, meter: usize, fps: f64) -> ActivationTrack {
    let mut beat = vec![0.02; t_len];
    let mut down = vec![0.01; t_len];
    let spread = |buf: &mut Vec<f64>, center: usize| {
        for (off, v) in [(-2i64, 0.3), (-1, 0.55), (0, 0.95), (1, 0.55), (2, 0.3)] {
            let idx = center as i64 + off;
            if idx >= 0 && (idx as usize) < t_len {
                buf[idx as usize] = f64::max(buf[idx as usize], v);
            }
        }
    };
    let mut k = 0usize;
    let mut frame = 0usize;
    while frame < t_len {
        spread(&mut beat, frame);
        if k % meter == 0 {
            spread(&mut down, frame);
        }
        k += 1;
        frame += period;
    }
    let mut tempo = vec![0.0; 300];
    tempo[119] = 1.0;
    ActivationTrack {
        beat,
        downbeat: down,
        tempo,
        fps,
    }
}

fn main() {
    let cfg = DbnConfig::default();
    let space = build_state_space(&cfg).unwrap();
    println!(
        "state space at {} fps, {}-{} BPM, meters {:?}: {} states in {} blocks",
        cfg.fps,
        cfg.min_bpm,
        cfg.max_bpm,
        cfg.beats_per_bar,
        space.len(),
        space.blocks.len()
    );

    // 120 BPM at 43.07 fps is about 21.5 frames per beat
    let acts = bumpy_track(1024, 21, 4, cfg.fps);
    let beats = viterbi_decode(&acts, &cfg).unwrap();
    println!("\ndecoded {} beats; first eight:", beats.events.len());
    for e in beats.events.iter().take(8) {
        println!("  {:.3}s position {}", e.time, e.position);
    }
    let intervals: Vec<f64> = beats
        .beat_times()
        .windows(2)
        .map(|w| w[1] - w[0])
        .collect();
    let mean = intervals.iter().sum::<f64>() / intervals.len() as f64;
    println!("mean inter-beat interval {:.3}s = {:.1} BPM", mean, 60.0 / mean);
    println!(
        "downbeats every {} beats: {:?}",
        4,
        beats
            .downbeat_times()
            .iter()
            .take(4)
            .map(|t| format!("{t:.2}s"))
            .collect::<Vec<_>>()
    );
}
