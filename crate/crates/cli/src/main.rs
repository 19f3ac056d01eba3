//! `stvsr`: continuous space-time video super-resolution from the command
//! line. See `stvsr --help` for the subcommands.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;

use stvsr_core::pipeline::{
    self, evaluate, generate_dataset, ingest, load_checkpoint, profile_memory,
    write_report_jsonl, ModelConfig, ScaleSpec, SpaceTimeModel, SynthConfig, TrainConfig,
    TrainMode,
};

#[derive(Parser)]
#[command(
    name = "stvsr",
    about = "Space-time video super-resolution: expand a frame sequence to an \
             arbitrary frame rate and fractional spatial scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training/evaluation dataset.
    MakeSynth(MakeSynthArgs),
    /// Train a model on a dataset of clips.
    Train(TrainArgs),
    /// Expand a sequence to a higher frame rate and resolution.
    Infer(InferArgs),
    /// Compare predicted sequences against ground truth.
    Eval(EvalArgs),
    /// Dump flow-guided pseudo labels and their source maps for inspection.
    PseudoDump(PseudoDumpArgs),
    /// Measure peak activation memory of an inference run.
    Profile(ProfileArgs),
}

#[derive(Args)]
struct MakeSynthArgs {
    /// Output dataset root (train/ and test/ splits are created below it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    clips: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (expects clip directories, or a train/ split).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the checkpoint and loss log.
    #[arg(long)]
    out: PathBuf,
    /// JSON file with a TrainConfig; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    clip_frames: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    log_every: Option<usize>,
    /// Disable forward-warping guidance in the temporal stage.
    #[arg(long)]
    no_fwg: bool,
    /// Disable deformable refinement in the temporal stage.
    #[arg(long)]
    no_da: bool,
    /// Disable the flow-guided texture-consistency loss.
    #[arg(long)]
    no_fgl: bool,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "fix" => Ok(TrainMode::Fix),
        "continuous" => Ok(TrainMode::Continuous),
        other => Err(format!("unknown mode {other:?}; use fix or continuous")),
    }
}

#[derive(Args)]
struct InferArgs {
    /// Input sequence: a directory of PNG frames or a raw tensor file.
    #[arg(long)]
    input: PathBuf,
    /// Output directory for the PNG frames.
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint; omitted means a freshly initialized model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Temporal upscaling factor R.
    #[arg(long, default_value_t = 2)]
    rate: usize,
    /// Isotropic spatial factor (shorthand for --scale-h and --scale-w).
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    scale_h: Option<f64>,
    #[arg(long)]
    scale_w: Option<f64>,
    /// Weight seed when no checkpoint is given.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Root of predicted sequences (or a single sequence directory).
    #[arg(long)]
    pred: PathBuf,
    /// Root of ground-truth sequences with matching layout.
    #[arg(long)]
    gt: PathBuf,
    /// Temporal factor the predictions were produced with; classifies
    /// frames into existing and interpolated.
    #[arg(long, default_value_t = 2)]
    rate: usize,
    /// Metrics report destination (JSON lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PseudoDumpArgs {
    /// Clip directory; consecutive frame triples (i, i+1, i+2) are treated
    /// as (reference 0, target, reference 1).
    #[arg(long)]
    input: PathBuf,
    /// Output directory for pseudo labels and source-id maps.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProfileArgs {
    /// Input sequence length.
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    rate: usize,
    #[arg(long, default_value_t = 4.0)]
    scale: f64,
    /// Square input side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Weight seed for the profiled model.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn load_model(checkpoint: &Option<PathBuf>, seed: u64) -> Result<SpaceTimeModel> {
    match checkpoint {
        Some(path) => {
            let (model, _) = load_checkpoint(path)
                .with_context(|| format!("loading checkpoint {}", path.display()))?;
            Ok(model)
        }
        None => Ok(SpaceTimeModel::new(ModelConfig {
            seed,
            ..ModelConfig::default()
        })),
    }
}

fn cmd_make_synth(args: MakeSynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        clips: args.clips,
        frames_per_clip: args.frames,
        height: args.size,
        width: args.size,
        seed: args.seed,
    };
    generate_dataset(&args.out, &cfg)?;
    println!(
        "{}",
        serde_json::json!({
            "dataset": args.out,
            "train_clips": cfg.clips,
            "test_clips": (cfg.clips / 4).max(1),
            "frames_per_clip": cfg.frames_per_clip,
            "size": [cfg.height, cfg.width],
        })
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config: TrainConfig = match &args.config {
        Some(path) => serde_json::from_str(
            &fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?,
        )?,
        None => TrainConfig::default(),
    };
    if let Some(mode) = args.mode {
        config.mode = mode;
    }
    if let Some(v) = args.iterations {
        config.iterations = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.crop {
        config.crop_size = v;
    }
    if let Some(v) = args.clip_frames {
        config.clip_frames = v;
    }
    if let Some(v) = args.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = args.log_every {
        config.log_every = v;
    }
    if args.no_fwg {
        config.use_fwg = false;
    }
    if args.no_da {
        config.use_da = false;
    }
    if args.no_fgl {
        config.use_fgl = false;
    }
    let report = pipeline::train(&config, &args.data, &args.out)?;
    let last = report.rows.last().context("no iterations ran")?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": report.checkpoint_path,
            "loss_log": report.loss_log_path,
            "iterations": report.rows.len(),
            "final_loss_exist": last.loss_exist,
            "final_loss_inter": last.loss_inter,
        })
    );
    Ok(())
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let (s_h, s_w) = match (args.scale, args.scale_h, args.scale_w) {
        (Some(s), None, None) => (s, s),
        (None, Some(h), Some(w)) => (h, w),
        (None, None, None) => bail!("pass --scale or both --scale-h and --scale-w"),
        _ => bail!("--scale conflicts with --scale-h/--scale-w"),
    };
    let scale = ScaleSpec::new(args.rate, s_h, s_w)?;
    let model = load_model(&args.checkpoint, args.seed)?;
    let seq = ingest(&args.input)?;
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut written = 0usize;
    let mut timestamps = Vec::new();
    pipeline::run_inference_streaming(&model, &seq, &scale, &mut |idx, t, frame| {
        let path = args.out.join(format!("frame_{idx:04}.png"));
        pipeline::data::save_frame_png(&path, &frame)?;
        timestamps.push(t);
        written += 1;
        Ok(())
    })?;
    println!(
        "{}",
        serde_json::json!({
            "output": args.out,
            "frames": written,
            "rate": args.rate,
            "scale": [s_h, s_w],
            "timestamps": timestamps,
        })
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let report = evaluate(&args.pred, &args.gt, args.rate)?;
    write_report_jsonl(&args.out, &report)?;
    let fmt = |v: f64| {
        if v.is_finite() {
            serde_json::json!(v)
        } else {
            serde_json::json!("inf")
        }
    };
    println!(
        "{}",
        serde_json::json!({
            "report": args.out,
            "frames": report.frames.len(),
            "overall": {"psnr": fmt(report.overall.psnr_mean), "ssim": report.overall.ssim_mean},
            "existing": {"count": report.existing.count, "psnr": fmt(report.existing.psnr_mean), "ssim": report.existing.ssim_mean},
            "interpolated": {"count": report.interpolated.count, "psnr": fmt(report.interpolated.psnr_mean), "ssim": report.interpolated.ssim_mean},
        })
    );
    Ok(())
}

fn cmd_pseudo_dump(args: PseudoDumpArgs) -> Result<()> {
    use stvsr_core::flow::estimate_flow;
    use stvsr_core::pseudo::make_pseudo_label;

    let seq = ingest(&args.input)?;
    if seq.len() < 3 {
        bail!("pseudo-dump needs at least 3 frames");
    }
    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let mut dumped = 0usize;
    for i in (0..seq.len() - 2).step_by(2) {
        let i0 = &seq.frames[i];
        let pred = &seq.frames[i + 1];
        let i1 = &seq.frames[i + 2];
        let v01 = estimate_flow(i0, i1)?;
        let v10 = estimate_flow(i1, i0)?;
        let (pseudo, grid) = make_pseudo_label(i0, i1, pred, &v01, &v10, 0.5)?;
        pipeline::data::save_frame_png(
            &args.out.join(format!("pseudo_{:04}.png", i + 1)),
            &pseudo,
        )?;
        // source map: black = reference 0, white = reference 1
        let (gh, gw) = grid.source_id.dim();
        let mut map = ndarray::Array3::zeros((3, gh, gw));
        for y in 0..gh {
            for x in 0..gw {
                let v = grid.source_id[[y, x]] as f64;
                for c in 0..3 {
                    map[[c, y, x]] = v;
                }
            }
        }
        pipeline::data::save_frame_png(
            &args.out.join(format!("source_{:04}.png", i + 1)),
            &map,
        )?;
        dumped += 1;
    }
    println!(
        "{}",
        serde_json::json!({"output": args.out, "labels": dumped, "patch_size": stvsr_core::PATCH_SIZE})
    );
    Ok(())
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let model = SpaceTimeModel::new(ModelConfig {
        seed: args.seed,
        ..ModelConfig::default()
    });
    let scale = ScaleSpec::isotropic(args.rate, args.scale)?;
    let record = profile_memory(&model, args.frames, &scale, args.size, args.size)?;
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::MakeSynth(args) => cmd_make_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Eval(args) => cmd_eval(args),
        Command::PseudoDump(args) => cmd_pseudo_dump(args),
        Command::Profile(args) => cmd_profile(args),
    }
}
