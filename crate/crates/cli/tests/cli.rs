//! End-to-end runs of the `stvsr` binary: dataset generation, a tiny
//! training run, inference, evaluation, pseudo-label dumps and profiling.

use std::path::Path;
use std::process::Command;

fn stvsr() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stvsr"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("spawn stvsr");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn count_pngs(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .map(|x| x == "png")
                .unwrap_or(false)
        })
        .count()
}

#[test]
fn full_cli_workflow() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let run = root.path().join("run");
    let sr = root.path().join("sr");

    // small dataset
    run_ok(stvsr().args([
        "make-synth",
        "--out",
        data.to_str().unwrap(),
        "--clips",
        "2",
        "--frames",
        "6",
        "--size",
        "32",
        "--seed",
        "3",
    ]));
    assert!(data.join("train/clip_001").exists());

    // a few iterations of training
    let out = run_ok(stvsr().args([
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--iterations",
        "3",
        "--crop",
        "8",
        "--seed",
        "9",
        "--log-every",
        "0",
    ]));
    assert!(out.contains("checkpoint"));
    assert!(run.join("model.ckpt").exists());
    assert!(run.join("loss_log.csv").exists());
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert!(log.starts_with("iteration,loss_exist,loss_inter,lr"));
    assert_eq!(log.lines().count(), 4);

    // inference from the trained checkpoint
    let clip = data.join("test/clip_000");
    run_ok(stvsr().args([
        "infer",
        "--input",
        clip.to_str().unwrap(),
        "--out",
        sr.to_str().unwrap(),
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--rate",
        "2",
        "--scale",
        "2.0",
    ]));
    // 6 input frames at R=2: 11 outputs
    assert_eq!(count_pngs(&sr), 11);

    // evaluation of a sequence against itself reports perfect scores
    let report = root.path().join("self.jsonl");
    let out = run_ok(stvsr().args([
        "eval",
        "--pred",
        sr.to_str().unwrap(),
        "--gt",
        sr.to_str().unwrap(),
        "--rate",
        "2",
        "--out",
        report.to_str().unwrap(),
    ]));
    assert!(out.contains("\"ssim\":1.0"), "self-eval must give ssim 1: {out}");
    assert!(out.contains("\"psnr\":\"inf\""), "self-eval psnr sentinel: {out}");
    let lines = std::fs::read_to_string(&report).unwrap();
    assert!(lines.lines().count() >= 11 + 3);
    assert!(lines.contains("\"kind\":\"interpolated\""));

    // pseudo-label dump
    let pseudo_out = root.path().join("pseudo");
    let out = run_ok(stvsr().args([
        "pseudo-dump",
        "--input",
        clip.to_str().unwrap(),
        "--out",
        pseudo_out.to_str().unwrap(),
    ]));
    assert!(out.contains("\"labels\":2"));
    assert!(pseudo_out.join("pseudo_0001.png").exists());
    assert!(pseudo_out.join("source_0001.png").exists());

    // memory profile
    let out = run_ok(stvsr().args([
        "profile", "--frames", "3", "--rate", "2", "--scale", "2.0", "--size", "24",
    ]));
    assert!(out.contains("\"peak_bytes\""));
    assert!(out.contains("\"within_budget\":true"));
}

#[test]
fn eval_rejects_mismatched_trees() {
    let root = tempfile::tempdir().unwrap();
    let pred = root.path().join("pred/seq_a");
    let gt = root.path().join("gt/seq_b");
    std::fs::create_dir_all(&pred).unwrap();
    std::fs::create_dir_all(&gt).unwrap();
    let out = stvsr()
        .args([
            "eval",
            "--pred",
            root.path().join("pred").to_str().unwrap(),
            "--gt",
            root.path().join("gt").to_str().unwrap(),
            "--out",
            root.path().join("r.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("seq_a") && stderr.contains("seq_b"), "{stderr}");
}

#[test]
fn infer_requires_scale_arguments() {
    let root = tempfile::tempdir().unwrap();
    let out = stvsr()
        .args([
            "infer",
            "--input",
            root.path().to_str().unwrap(),
            "--out",
            root.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
