//! End-to-end miniature run: synthesize clips, train a small encoder,
//! decode held-out clips with the DBN, and score the result.
//!
//! This uses a reduced setting (short clips, few epochs) so it finishes in
//! about a minute; the `beatkit train-demo` command runs the full
//! desk-scale protocol.
//!
//! Run with: cargo run --release --example train_and_track

use beatkit::dbn::{viterbi_decode, DbnConfig};
use beatkit::metrics;
use beatkit::model::{Encoder, EncoderConfig};
use beatkit::rng::Rng;
use beatkit::synth::{synth_clip, SynthParams};
use beatkit::train::{train_loop, TrainConfig};

fn main() {
    let cfg = EncoderConfig::desk();
    let params = SynthParams {
        frames: 1024,
        n_mel: cfg.n_mel,
        ..Default::default()
    };
    let dataset: Vec<_> = (0..12)
        .map(|i| synth_clip(&params, &mut Rng::new(100 + i)).unwrap())
        .collect();
    let held_out: Vec<_> = (0..3)
        .map(|i| synth_clip(&params, &mut Rng::new(900 + i)).unwrap())
        .collect();

    let mut rng = Rng::new(1);
    let model = Encoder::new(cfg, &mut rng).unwrap();
    let train_cfg = TrainConfig {
        epochs: 10,
        seed: 5,
        ..Default::default()
    };
    println!("training on {} clips...", dataset.len());
    let (model, history) = train_loop(model, &dataset, train_cfg).unwrap();
    for e in &history.epochs {
        println!(
            "  epoch {:2}: train {:.4}  val {:.4}  lr {:.0e}",
            e.epoch, e.train_loss, e.val_loss, e.lr
        );
    }

    println!("\ndecoding held-out clips:");
    for (i, (clip, ann)) in held_out.iter().enumerate() {
        let (acts, _) = model.infer(clip, None).unwrap();
        let dbn = DbnConfig {
            fps: clip.fps,
            ..Default::default()
        };
        let beats = viterbi_decode(&acts, &dbn).unwrap();
        let beat_f = metrics::f_measure(&beats.beat_times(), &ann.beat_times, 0.07);
        let down_f = metrics::f_measure(&beats.downbeat_times(), &ann.downbeat_times(), 0.07);
        println!(
            "  clip {i}: decoded {} beats (reference {}), beat F {:.3}, downbeat F {:.3}",
            beats.events.len(),
            ann.beat_times.len(),
            beat_f,
            down_f
        );
    }
}
