// full-sweep finite-difference check across candidate seeds
use beatkit::model::{DemixedClip, Encoder, EncoderConfig, Mode};
use beatkit::rng::Rng;
use beatkit::synth::{synth_clip, SynthParams};
use beatkit::targets::{build_target_track, multitask_loss_on_tape};
use beatkit::tensor::{Tape, Tensor};

fn main() {
    for seed in [404u64, 405, 406, 407, 408, 409, 410, 411] {
        run_seed(seed);
    }
}

fn run_seed(seed: u64) {
    let cfg = EncoderConfig::tiny();
    let mut rng = Rng::new(seed);
    let mut model = Encoder::new(cfg.clone(), &mut rng).unwrap();
    for (_, t) in model.params.iter_mut() {
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.uniform(-0.08, 0.08);
            }
        }
    }
    let sp = SynthParams {
        frames: 32,
        n_mel: cfg.n_mel,
        min_bpm: 200.0,
        max_bpm: 235.0,
        bpm_grid: 5.0,
        ..Default::default()
    };
    let (clip5, ann) = synth_clip(&sp, &mut rng).unwrap();
    let (t, f) = (clip5.frames(), clip5.mel_bins());
    let mut vals = Vec::with_capacity(t * 3 * f);
    for ti in 0..t {
        for ch in 0..3 {
            let base = (ti * 5 + ch) * f;
            vals.extend_from_slice(&clip5.values.data()[base..base + f]);
        }
    }
    let clip = DemixedClip::new(
        Tensor::new(vec![t, 3, f], vals).unwrap(),
        clip5.fps,
        clip5.channel_names[..3].to_vec(),
    )
    .unwrap();
    let tgt = build_target_track(&ann, t, clip.fps).unwrap();

    let loss_of = |model: &Encoder| -> f64 {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let pass = model
            .forward(&mut tape, &bound, &clip, Mode::Eval, None)
            .unwrap();
        let loss =
            multitask_loss_on_tape(&mut tape, pass.beat, pass.downbeat, pass.tempo, &tgt).unwrap();
        tape.data(loss)[0]
    };
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let pass = model
        .forward(&mut tape, &bound, &clip, Mode::Eval, None)
        .unwrap();
    let loss =
        multitask_loss_on_tape(&mut tape, pass.beat, pass.downbeat, pass.tempo, &tgt).unwrap();
    tape.backward(loss).unwrap();

    let h = 1e-4;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut over = 0usize;
    let analytic: Vec<(String, Vec<f64>)> = model
        .params
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            (
                name.to_string(),
                tape.grad(bound.values()[i]).unwrap().to_vec(),
            )
        })
        .collect();
    for (p_idx, (name, grads)) in analytic.iter().enumerate() {
        for elem in 0..grads.len() {
            let mut plus = model.clone();
            plus.params.tensor_mut(p_idx).data_mut()[elem] += h;
            let mut minus = model.clone();
            minus.params.tensor_mut(p_idx).data_mut()[elem] -= h;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = grads[elem];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
                worst_at = format!("{name}[{elem}]");
            }
            if rel > 1e-4 {
                over += 1;
            }
        }
    }
    println!("seed {seed}: worst rel {worst:.2e} at {worst_at}, {over} over tolerance");
}
