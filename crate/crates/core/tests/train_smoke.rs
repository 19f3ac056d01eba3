//! End-to-end training smoke tests: overfitting one clip, determinism under
//! a fixed seed, and the fixed-scale inference guard.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stvsr_core::pipeline::{
    load_checkpoint, run_inference, synth_clip, train, ScaleSpec, TrainConfig, TrainMode,
};
use stvsr_core::pipeline::data::save_frame_png;
use std::fs;
use std::path::Path;

fn write_single_clip_dataset(root: &Path, frames: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let clip = synth_clip(&mut rng, frames, 64, 64);
    let dir = root.join("train").join("clip_000");
    fs::create_dir_all(&dir).unwrap();
    for (i, frame) in clip.iter().enumerate() {
        save_frame_png(&dir.join(format!("frame_{i:03}.png")), frame).unwrap();
    }
}

#[test]
fn overfit_one_clip_shrinks_loss() {
    let data = tempfile::tempdir().unwrap();
    write_single_clip_dataset(data.path(), 8);
    let out = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        mode: TrainMode::Fix,
        iterations: 200,
        seed: 3,
        log_every: 0,
        ..TrainConfig::default()
    };
    let report = train(&config, data.path(), out.path()).unwrap();
    let total = |row: &stvsr_core::pipeline::LossRow| row.loss_exist + row.loss_inter;
    let initial = total(&report.rows[0]);
    let tail = &report.rows[report.rows.len() - 10..];
    let final_mean = tail.iter().map(total).sum::<f64>() / tail.len() as f64;
    // The zero-initialized residual heads make the iteration-0 loss equal
    // the bilinear-baseline loss already, so the attainable 200-iteration
    // ratio starts from a strong baseline. Measured 0.55 on the first run;
    // frozen at 0.6.
    assert!(
        final_mean < 0.6 * initial,
        "expected final loss under 0.6x the initial: {initial:.5} -> {final_mean:.5}"
    );
    assert!(report.checkpoint_path.exists());
    assert!(report.loss_log_path.exists());
}

#[test]
fn fixed_seed_reproduces_loss_log() {
    let data = tempfile::tempdir().unwrap();
    write_single_clip_dataset(data.path(), 6);
    let config = TrainConfig {
        mode: TrainMode::Continuous,
        iterations: 5,
        seed: 17,
        log_every: 0,
        ..TrainConfig::default()
    };
    let out1 = tempfile::tempdir().unwrap();
    let out2 = tempfile::tempdir().unwrap();
    let a = train(&config, data.path(), out1.path()).unwrap();
    let b = train(&config, data.path(), out2.path()).unwrap();
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(b.rows.iter()) {
        assert_eq!(ra.loss_exist.to_bits(), rb.loss_exist.to_bits());
        assert_eq!(ra.loss_inter.to_bits(), rb.loss_inter.to_bits());
        assert_eq!(ra.lr.to_bits(), rb.lr.to_bits());
    }
    // the serialized checkpoints agree bit for bit
    let bytes_a = fs::read(&a.checkpoint_path).unwrap();
    let bytes_b = fs::read(&b.checkpoint_path).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn fix_mode_checkpoint_rejects_other_scales() {
    let data = tempfile::tempdir().unwrap();
    write_single_clip_dataset(data.path(), 6);
    let out = tempfile::tempdir().unwrap();
    let config = TrainConfig {
        mode: TrainMode::Fix,
        iterations: 2,
        seed: 1,
        log_every: 0,
        ..TrainConfig::default()
    };
    let report = train(&config, data.path(), out.path()).unwrap();
    let (model, _) = load_checkpoint(&report.checkpoint_path).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let frames = synth_clip(&mut rng, 3, 32, 32);
    let seq = stvsr_core::FrameSequence::new(frames, "clip").unwrap();
    let err = run_inference(&model, &seq, &ScaleSpec::isotropic(2, 2.8).unwrap());
    assert!(err.is_err(), "fixed-scale model must reject S=2.8");
    assert!(run_inference(&model, &seq, &ScaleSpec::isotropic(2, 4.0).unwrap()).is_ok());
}
