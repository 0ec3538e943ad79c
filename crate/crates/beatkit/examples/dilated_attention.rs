//! Dilated self-attention basics: the linear-complexity kernel agrees with
//! the quadratic masked reference, and stacked dilations grow the receptive
//! field exponentially.
//!
//! Run with: cargo run --release --example dilated_attention

use beatkit::dsa::{self, paper_head_windows, reference, DsaConfig};
use beatkit::rng::Rng;
use beatkit::tensor::{Tape, Tensor};

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn main() {
    let mut rng = Rng::new(7);
    let t = 48;
    let d_f = 8;

    println!("kernel vs masked reference (max abs difference):");
    for &r in &[1usize, 2, 4] {
        for &(m, n) in &[(2usize, 2usize), (0, 4), (4, 0)] {
            let cfg = DsaConfig {
                m,
                n,
                r,
                d_f,
                heads: vec![(m, n)],
            };
            let q = random(&[t, d_f], &mut rng);
            let k = random(&[t, d_f], &mut rng);
            let v = random(&[t, d_f], &mut rng);
            let oracle = reference::masked_attention(&q, &k, &v, &cfg).unwrap();
            let mut tape = Tape::new();
            let (qv, kv, vv) = (tape.constant(&q), tape.constant(&k), tape.constant(&v));
            let out = dsa::dsa_forward(&mut tape, qv, kv, vv, &cfg, None).unwrap();
            let diff = tape.to_tensor(out.output).max_abs_diff(&oracle);
            println!("  r={r} window=({m},{n}): {diff:.2e}");
        }
    }

    println!("\nattainable positions from i=10 in a T=32 sequence:");
    for &r in &[1usize, 2, 4, 8] {
        let cfg = DsaConfig::symmetric(2, r, d_f);
        println!("  r={r}: {:?}", reference::attainable_set(10, 32, &cfg));
    }

    println!("\nreceptive field of the full nine-layer stack:");
    let layers: Vec<DsaConfig> = (0..9)
        .map(|l| DsaConfig {
            m: 2,
            n: 2,
            r: 1 << l,
            d_f: 32,
            heads: paper_head_windows(),
        })
        .collect();
    for depth in [1, 3, 6, 9] {
        let (frames, seconds) = dsa::receptive_field(&layers[..depth], 43.07).unwrap();
        println!("  {depth} layers: {frames} frames = {seconds:.2} s");
    }
}
