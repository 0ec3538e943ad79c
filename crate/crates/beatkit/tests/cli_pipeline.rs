//! The beatkit binary end to end: generate, train, decode, export,
//! evaluate, with determinism and exit-code checks.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_beatkit"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn beatkit");
    assert!(
        out.status.success(),
        "beatkit {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn workdir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("beatkit_cli_tests")
        .join(format!("{name}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn checksum(path: &Path) -> u64 {
    beatkit::io::file_checksum(path).unwrap()
}

#[test]
fn gen_data_is_seed_deterministic() {
    let dir = workdir("gen_det");
    let a = dir.join("a");
    let b = dir.join("b");
    for out in [&a, &b] {
        run_ok(&[
            "gen-data", "--out", out.to_str().unwrap(), "--count", "3", "--frames", "256",
            "--profile", "tiny", "--seed", "9",
        ]);
    }
    for name in ["clip_000.bspc", "clip_001.beats", "manifest.tsv"] {
        assert_eq!(
            checksum(&a.join(name)),
            checksum(&b.join(name)),
            "{name} differs between identical seeds"
        );
    }
    // a different seed changes the data
    let c = dir.join("c");
    run_ok(&[
        "gen-data", "--out", c.to_str().unwrap(), "--count", "3", "--frames", "256",
        "--profile", "tiny", "--seed", "10",
    ]);
    assert_ne!(checksum(&a.join("clip_000.bspc")), checksum(&c.join("clip_000.bspc")));
}

#[test]
fn gen_data_count_zero_writes_empty_manifest() {
    let dir = workdir("gen_zero");
    let out = dir.join("data");
    run_ok(&[
        "gen-data", "--out", out.to_str().unwrap(), "--count", "0", "--profile", "tiny",
    ]);
    let manifest = std::fs::read_to_string(out.join("manifest.tsv")).unwrap();
    assert!(manifest.is_empty());
}

#[test]
fn train_decode_evaluate_roundtrip() {
    let dir = workdir("pipeline");
    let data = dir.join("data");
    run_ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--count", "4", "--frames", "384",
        "--profile", "tiny", "--seed", "3",
    ]);
    let ckpt = dir.join("model.btck");
    run_ok(&[
        "train-demo", "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        "--profile", "tiny", "--epochs", "2", "--seed", "4",
    ]);
    assert!(ckpt.exists());
    assert!(dir.join("model.losses.tsv").exists());
    assert!(dir.join("model.config").exists());
    let log = std::fs::read_to_string(dir.join("model.losses.tsv")).unwrap();
    assert_eq!(log.lines().count(), 3, "header plus two epochs");

    // decode one clip twice: outputs are byte-identical
    let est = dir.join("est");
    std::fs::create_dir_all(&est).unwrap();
    let beats = est.join("clip_000.beats");
    for _ in 0..2 {
        run_ok(&[
            "decode", "--checkpoint", ckpt.to_str().unwrap(),
            "--clip", data.join("clip_000.bspc").to_str().unwrap(),
            "--out", beats.to_str().unwrap(),
        ]);
    }
    assert!(beats.with_extension("bact").exists(), "activations persisted");
    let first = checksum(&beats);
    run_ok(&[
        "decode", "--checkpoint", ckpt.to_str().unwrap(),
        "--clip", data.join("clip_000.bspc").to_str().unwrap(),
        "--out", beats.to_str().unwrap(),
    ]);
    assert_eq!(first, checksum(&beats), "decode must be deterministic");

    // evaluating the reference against itself scores 1.0 everywhere
    let out = bin()
        .args(["evaluate", "--est", data.to_str().unwrap(), "--ref", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = String::from_utf8_lossy(&out.stdout);
    let mean = report.lines().last().unwrap();
    assert!(mean.starts_with("MEAN"));
    for field in mean.split('\t').skip(1) {
        assert_eq!(field, "1.0000", "self-evaluation must be perfect: {report}");
    }
}

#[test]
fn evaluate_empty_est_dir_warns_and_succeeds() {
    let dir = workdir("eval_empty");
    let data = dir.join("data");
    run_ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--count", "2", "--frames", "256",
        "--profile", "tiny", "--seed", "5",
    ]);
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = bin()
        .args(["evaluate", "--est", empty.to_str().unwrap(), "--ref", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(out.status.success(), "empty estimate dir is success with warning");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("warning"));
}

#[test]
fn export_attention_writes_named_stochastic_matrices() {
    let dir = workdir("attn");
    let data = dir.join("data");
    run_ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--count", "2", "--frames", "256",
        "--profile", "tiny", "--seed", "6",
    ]);
    let ckpt = dir.join("model.btck");
    run_ok(&[
        "train-demo", "--data", data.to_str().unwrap(), "--out", ckpt.to_str().unwrap(),
        "--profile", "tiny", "--epochs", "1", "--seed", "6",
    ]);
    let attn = dir.join("attn");
    run_ok(&[
        "export-attention", "--checkpoint", ckpt.to_str().unwrap(),
        "--clip", data.join("clip_001.bspc").to_str().unwrap(),
        "--out", attn.to_str().unwrap(), "--steps", "1,3",
    ]);
    for stem in ["P_L1_headavg", "P_L3_headavg"] {
        assert!(attn.join(format!("{stem}.csv")).exists());
        assert!(attn.join(format!("{stem}.pgm")).exists());
    }
    // exported rows sum to one
    let m = beatkit::markov::import_csv(&attn.join("P_L3_headavg.csv")).unwrap();
    for s in m.row_sums() {
        assert!((s - 1.0).abs() < 1e-6);
    }
    // requesting more steps than layers is a data error (exit 2)
    let out = bin()
        .args([
            "export-attention", "--checkpoint", ckpt.to_str().unwrap(),
            "--clip", data.join("clip_001.bspc").to_str().unwrap(),
            "--out", attn.to_str().unwrap(), "--steps", "9",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_dsa_emits_csv() {
    let out = run_ok(&["bench-dsa", "--sizes", "128,256", "--trials", "1", "--d-f", "4"]);
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "T,kernel_ns,oracle_ns,kernel_peak_bytes,oracle_peak_bytes"
    );
    assert_eq!(lines.count(), 2);
}

#[test]
fn exit_codes_follow_the_contract() {
    // usage error
    let out = bin().args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["decode"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "missing required flags is usage");
    // data error
    let out = bin()
        .args(["decode", "--checkpoint", "/nonexistent.btck", "--clip", "/none.bspc", "--out", "/tmp/x.beats"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn thread_cap_does_not_change_evaluate_output() {
    let dir = workdir("threads");
    let data = dir.join("data");
    run_ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--count", "4", "--frames", "256",
        "--profile", "tiny", "--seed", "8",
    ]);
    let run_with_threads = |n: &str| -> Vec<u8> {
        let out = bin()
            .env("BEATKIT_THREADS", n)
            .args(["evaluate", "--est", data.to_str().unwrap(), "--ref", data.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success());
        out.stdout
    };
    assert_eq!(run_with_threads("1"), run_with_threads("4"));
}

#[test]
fn train_demo_is_seed_deterministic_and_resumable() {
    let dir = workdir("train_det");
    let data = dir.join("data");
    run_ok(&[
        "gen-data", "--out", data.to_str().unwrap(), "--count", "3", "--frames", "256",
        "--profile", "tiny", "--seed", "11",
    ]);

    // same seed twice: identical checkpoint bytes and loss log
    let (a, b) = (dir.join("a.btck"), dir.join("b.btck"));
    for out in [&a, &b] {
        run_ok(&[
            "train-demo", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(),
            "--profile", "tiny", "--epochs", "2", "--seed", "12",
        ]);
    }
    assert_eq!(checksum(&a), checksum(&b));
    assert_eq!(
        checksum(&a.with_extension("losses.tsv")),
        checksum(&b.with_extension("losses.tsv"))
    );

    // 1 epoch + resume 1 epoch reproduces the continuous 2-epoch run
    let c = dir.join("c.btck");
    run_ok(&[
        "train-demo", "--data", data.to_str().unwrap(), "--out", c.to_str().unwrap(),
        "--profile", "tiny", "--epochs", "1", "--seed", "12",
    ]);
    run_ok(&[
        "train-demo", "--data", data.to_str().unwrap(), "--out", c.to_str().unwrap(),
        "--profile", "tiny", "--epochs", "1", "--seed", "12", "--resume",
    ]);
    assert_eq!(checksum(&a), checksum(&c), "resumed run must match continuous run");
    // the resumed log holds the second epoch's row, identical to the
    // continuous run's second row
    let cont = std::fs::read_to_string(a.with_extension("losses.tsv")).unwrap();
    let resumed = std::fs::read_to_string(c.with_extension("losses.tsv")).unwrap();
    let cont_epoch1 = cont.lines().nth(2).unwrap();
    let resumed_epoch1 = resumed.lines().nth(1).unwrap();
    assert_eq!(cont_epoch1, resumed_epoch1);
}
