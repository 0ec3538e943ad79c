//! Synthesize a small metrical corpus and write it in the on-disk formats
//! (BSPC spectrograms plus beat annotation text files).
//!
//! Run with: cargo run --release --example generate_data

use beatkit::io;
use beatkit::rng::Rng;
use beatkit::synth::{synth_clip, SynthParams};

fn main() {
    let dir = std::env::temp_dir().join("beatkit_example_data");
    std::fs::create_dir_all(&dir).unwrap();
    let params = SynthParams {
        frames: 1024,
        ..Default::default()
    };
    for i in 0..4u64 {
        let mut rng = Rng::new(42).derive(i);
        let (clip, ann) = synth_clip(&params, &mut rng).unwrap();
        let clip_path = dir.join(format!("clip_{i}.bspc"));
        let beats_path = dir.join(format!("clip_{i}.beats"));
        io::save_clip(&clip, &clip_path).unwrap();
        io::save_beats(&io::annotation_to_events(&ann), &beats_path).unwrap();
        let bpm = 60.0 / (ann.beat_times[1] - ann.beat_times[0]);
        println!(
            "clip_{i}: {} frames, {} beats at {:.0} BPM in {}/4-like meter, checksum {:016x}",
            clip.frames(),
            ann.beat_times.len(),
            bpm,
            ann.beats_per_bar,
            io::file_checksum(&clip_path).unwrap()
        );
    }
    println!("\nwrote corpus to {}", dir.display());
    println!("the beatkit binary writes the same formats via `beatkit gen-data`");
}
