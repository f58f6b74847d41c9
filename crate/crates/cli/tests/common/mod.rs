#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dncshap::audio::Waveform;
use dncshap::io::{encode_ppm, encode_wav};
use dncshap::Tensor;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dncshap"))
}

/// Runs the binary without inheriting a job count from the environment.
pub fn run(args: &[&str]) -> Output {
    bin()
        .env_remove("DNC_ATTRIB_JOBS")
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Deterministic image with a pattern that depends on `seed`.
pub fn write_image(path: &Path, size: usize, seed: usize) {
    let image = Tensor::from_fn(&[size, size, 3], |i| ((i * (7 + seed) + 13 * seed) % 29) as f64 / 28.0);
    std::fs::write(path, encode_ppm(&image).unwrap()).unwrap();
}

/// One second of a two-tone signal at 16 kHz.
pub fn write_wav(path: &Path, f1: f64, f2: f64) {
    let rate = 16000.0;
    let samples = (0..16000)
        .map(|n| {
            let t = n as f64 / rate;
            0.4 * (2.0 * std::f64::consts::PI * f1 * t).sin() + 0.2 * (2.0 * std::f64::consts::PI * f2 * t).sin()
        })
        .collect();
    std::fs::write(path, encode_wav(&Waveform::new(samples, rate).unwrap())).unwrap();
}

/// Trains a small model into `dir` and returns the checkpoint path.
pub fn train_small(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let seed = seed.to_string();
    let mut args = vec![
        "train",
        "--seed",
        &seed,
        "--out",
        s(dir),
        "--size",
        "8",
        "--samples",
        "48",
        "--epochs",
        "2",
    ];
    args.extend_from_slice(extra);
    run_ok(&args);
    dir.join("model.ckpt")
}

pub fn read_matrix(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

pub fn matrix_sum(path: &Path) -> f64 {
    read_matrix(path).iter().flatten().sum()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}
