//! Densify a model's temporal attention into Markov transition matrices,
//! take multi-step products, and export heatmaps.
//!
//! Run with: cargo run --release --example attention_markov

use beatkit::markov::{self, HeadSelect};
use beatkit::model::{Encoder, EncoderConfig};
use beatkit::rng::Rng;
use beatkit::synth::{synth_clip, SynthParams};

fn main() {
    let cfg = EncoderConfig::desk();
    let mut rng = Rng::new(3);
    let model = Encoder::new(cfg.clone(), &mut rng).unwrap();
    let (clip, _) = synth_clip(
        &SynthParams {
            frames: 256,
            n_mel: cfg.n_mel,
            ..Default::default()
        },
        &mut rng,
    )
    .unwrap();

    // capture the drum channel's attention through every TTL
    let drum = clip.channel_names.iter().position(|n| n == "drum").unwrap();
    let (_, attention) = model.infer(&clip, Some(drum)).unwrap();
    let one_step: Vec<_> = attention
        .iter()
        .map(|a| markov::layer_attention_matrix(a, HeadSelect::Average).unwrap())
        .collect();

    println!("one-step sparsity (nonzeros in row 128 of 256):");
    for (l, m) in one_step.iter().enumerate() {
        println!("  layer {l} (r={}): {}", attention[l].r, m.row_nnz()[128]);
    }

    println!("\nmulti-step products stay row-stochastic while support spreads:");
    for l in [1usize, 3, 6] {
        let p = markov::multi_step_product(&one_step[..l]).unwrap();
        let worst = p
            .row_sums()
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0, f64::max);
        println!(
            "  P^({l}): row-sum error {worst:.2e}, nonzeros in row 128: {}",
            p.row_nnz()[128]
        );
    }

    let dir = std::env::temp_dir().join("beatkit_example_attention");
    std::fs::create_dir_all(&dir).unwrap();
    for l in [1usize, 3] {
        let p = markov::multi_step_product(&one_step[..l]).unwrap();
        let stem = markov::export_stem(l, HeadSelect::Average);
        markov::export_csv(&p, &dir.join(format!("{stem}.csv"))).unwrap();
        markov::export_pgm(&p, &dir.join(format!("{stem}.pgm"))).unwrap();
    }
    println!("\nwrote heatmaps to {}", dir.display());
}
