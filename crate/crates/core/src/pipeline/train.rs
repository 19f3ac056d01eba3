//! Training: scale-sampled clips, temporal-flip augmentation, Charbonnier
//! supervision on existing frames and pseudo-label-augmented L1 on
//! interpolated frames, Adam with cosine annealing.

use crate::error::{Error, Result};
use crate::losses::{charbonnier, inter_loss, total_loss};
use crate::nn::{cosine_lr, Adam};
use crate::pipeline::checkpoint::save_checkpoint;
use crate::pipeline::data::{degrade, ingest, FrameSequence};
use crate::pipeline::model::{ModelConfig, SpaceTimeModel};
use crate::pseudo::make_pseudo_label;
use crate::tensor::Tensor;
use crate::upsample::ScaleSpec;
use crate::{CHARBONNIER_EPS, PSEUDO_ALPHA};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Fixed spatial factor of 4, scale conditioning disabled.
    Fix,
    /// Scales sampled per iteration from `scale_set`.
    Continuous,
}

fn default_scale_set() -> Vec<f64> {
    // 2.0 to 4.0 with a stride of 0.2
    (0..=10).map(|i| 2.0 + 0.2 * i as f64).collect()
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub seed: u64,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub alpha: f64,
    pub scale_set: Vec<f64>,
    /// LR crop side in pixels.
    pub crop_size: usize,
    /// Consecutive HR frames per training sample.
    pub clip_frames: usize,
    pub batch_size: usize,
    /// Forward-warping guidance in the temporal stage.
    pub use_fwg: bool,
    /// Deformable refinement in the temporal stage.
    pub use_da: bool,
    /// Flow-guided texture-consistency loss on interpolated frames.
    pub use_fgl: bool,
    /// Progress lines on stderr every this many iterations (0 = quiet).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Continuous,
            iterations: 2000,
            seed: 0,
            lr_init: 2e-4,
            lr_final: 1e-7,
            beta1: 0.9,
            beta2: 0.999,
            alpha: PSEUDO_ALPHA,
            scale_set: default_scale_set(),
            crop_size: 16,
            clip_frames: 5,
            batch_size: 1,
            use_fwg: true,
            use_da: true,
            use_fgl: true,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("iterations must be positive"));
        }
        if self.crop_size < 8 {
            return Err(Error::invalid("crop_size must be at least 8"));
        }
        if self.clip_frames < 3 || self.clip_frames.is_multiple_of(2) {
            return Err(Error::invalid(
                "clip_frames must be odd and at least 3 so every dropped frame is bracketed",
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if self.mode == TrainMode::Continuous {
            if self.scale_set.is_empty() {
                return Err(Error::invalid("scale_set must not be empty"));
            }
            if self.scale_set.iter().any(|s| !(1.0..=8.0).contains(s)) {
                return Err(Error::invalid("scale_set entries must lie in [1, 8]"));
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            scale_conditioning: self.mode == TrainMode::Continuous,
            use_fwg: self.use_fwg,
            use_da: self.use_da,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub iteration: usize,
    pub loss_exist: f64,
    pub loss_inter: f64,
    pub lr: f64,
}

pub struct TrainReport {
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub rows: Vec<LossRow>,
}

/// Loss of one clip at one scale: existing frames against Charbonnier,
/// interpolated frames against L1 plus the pseudo-label term. Returns the
/// total plus the two component values.
pub fn clip_loss(
    model: &SpaceTimeModel,
    hr_frames: &[Array3<f64>],
    scale: &ScaleSpec,
    alpha: f64,
    use_fgl: bool,
) -> Result<(Tensor, f64, f64)> {
    let hr = FrameSequence::new(hr_frames.to_vec(), "clip")?;
    let clip = degrade(&hr, scale)?;
    let n = clip.lr.len();
    let (flows_fwd, flows_bwd) = model.compute_flow_pairs(&clip.lr.frames)?;
    let features = model.extractor.extract(&clip.lr.frames, scale)?;
    let enhanced = model.propagation.propagate(&features, &flows_fwd, &flows_bwd)?;

    let mut exist_terms = Vec::with_capacity(n);
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        let pred = model
            .upsampler
            .upsample(&enhanced[i], scale, &clip.lr.frames[i])?;
        exist_terms.push(charbonnier(
            &pred,
            &clip.gt_existing[i].clone().into_dyn(),
            CHARBONNIER_EPS,
        )?);
    }

    let mut inter_terms = Vec::new();
    for i in 0..clip.gt_interpolated.len() {
        let t = 0.5;
        let feat_t = model.temporal.interpolate_feature(
            &enhanced[i],
            &enhanced[i + 1],
            &flows_fwd[i],
            &flows_bwd[i],
            t,
        )?;
        let base = model.base_for_t(
            &clip.lr.frames[i],
            &clip.lr.frames[i + 1],
            &flows_fwd[i],
            &flows_bwd[i],
            t,
        )?;
        let pred = model.upsampler.upsample(&feat_t, scale, &base)?;
        let gt = clip.gt_interpolated[i].clone().into_dyn();
        let term = if use_fgl {
            let (gh, gw) = {
                let d = clip.gt_interpolated[i].dim();
                (d.1, d.2)
            };
            let v01_hr = flows_fwd[i].resized(gh, gw);
            let v10_hr = flows_bwd[i].resized(gh, gw);
            let pred_frame = pred
                .to_array()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let (pseudo, _) = make_pseudo_label(
                &clip.gt_existing[i],
                &clip.gt_existing[i + 1],
                &pred_frame,
                &v01_hr,
                &v10_hr,
                t,
            )?;
            inter_loss(&pred, &gt, &pseudo.into_dyn(), alpha)?
        } else {
            inter_loss(&pred, &gt, &gt, 0.0)?
        };
        inter_terms.push(term);
    }

    let mean_item = |terms: &[Tensor]| {
        if terms.is_empty() {
            0.0
        } else {
            terms.iter().map(|t| t.item()).sum::<f64>() / terms.len() as f64
        }
    };
    let exist_val = mean_item(&exist_terms);
    let inter_val = mean_item(&inter_terms);
    let total = total_loss(&exist_terms, &inter_terms)?;
    Ok((total, exist_val, inter_val))
}

struct Sampler {
    clips: Vec<FrameSequence>,
}

impl Sampler {
    fn load(data_root: &Path) -> Result<Self> {
        let train_dir = data_root.join("train");
        let root = if train_dir.is_dir() {
            train_dir
        } else {
            data_root.to_path_buf()
        };
        let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
            .map_err(|e| Error::io(root.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Data(format!(
                "no clip directories under {}",
                root.display()
            )));
        }
        let mut clips = Vec::with_capacity(dirs.len());
        for dir in &dirs {
            clips.push(ingest(dir)?);
        }
        Ok(Sampler { clips })
    }

    /// Draws `clip_frames` consecutive HR frames, temporally flipped with
    /// probability one half, cropped so the LR crop is `crop` pixels square
    /// at scale `s`.
    fn sample(
        &self,
        rng: &mut ChaCha8Rng,
        clip_frames: usize,
        crop: usize,
        scale: &ScaleSpec,
    ) -> Result<Vec<Array3<f64>>> {
        let clip = &self.clips[rng.gen_range(0..self.clips.len())];
        if clip.len() < clip_frames {
            return Err(Error::Data(format!(
                "clip {} has {} frames, need {clip_frames}",
                clip.source_path,
                clip.len()
            )));
        }
        let start = rng.gen_range(0..=clip.len() - clip_frames);
        let flip = rng.gen_bool(0.5);
        let (h, w) = clip.frame_size();
        let (crop_h, crop_w) = scale.output_size(crop, crop);
        if crop_h > h || crop_w > w {
            return Err(Error::Data(format!(
                "HR frames ({h}x{w}) too small for a {crop}px LR crop at scale ({}, {})",
                scale.s_h, scale.s_w
            )));
        }
        let y0 = rng.gen_range(0..=h - crop_h);
        let x0 = rng.gen_range(0..=w - crop_w);
        let mut frames: Vec<Array3<f64>> = (start..start + clip_frames)
            .map(|i| {
                clip.frames[i]
                    .slice(ndarray::s![.., y0..y0 + crop_h, x0..x0 + crop_w])
                    .to_owned()
            })
            .collect();
        if flip {
            frames.reverse();
        }
        Ok(frames)
    }
}

/// Optimizes the model on the clips under `data_root` and writes the final
/// checkpoint plus a CSV loss log into `out_dir`.
pub fn train(config: &TrainConfig, data_root: &Path, out_dir: &Path) -> Result<TrainReport> {
    config.validate()?;
    let sampler = Sampler::load(data_root)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let model = SpaceTimeModel::new(config.model_config());
    let mut opt = Adam::new(model.params(), config.beta1, config.beta2);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let mut rows = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let scale = match config.mode {
            TrainMode::Fix => ScaleSpec::isotropic(2, 4.0).unwrap(),
            TrainMode::Continuous => {
                let s = config.scale_set[rng.gen_range(0..config.scale_set.len())];
                ScaleSpec::isotropic(2, s)?
            }
        };
        let mut exist_acc = 0.0;
        let mut inter_acc = 0.0;
        let mut batch: Option<Tensor> = None;
        for _ in 0..config.batch_size {
            let frames = sampler.sample(&mut rng, config.clip_frames, config.crop_size, &scale)?;
            let (loss, e, i) = clip_loss(&model, &frames, &scale, config.alpha, config.use_fgl)?;
            exist_acc += e / config.batch_size as f64;
            inter_acc += i / config.batch_size as f64;
            let scaled = crate::tensor::mul_scalar(&loss, 1.0 / config.batch_size as f64);
            batch = Some(match batch {
                Some(acc) => crate::tensor::add(&acc, &scaled),
                None => scaled,
            });
        }
        let loss = batch.unwrap();
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                message: format!("loss became {loss_val}"),
            });
        }
        let lr = cosine_lr(config.lr_init, config.lr_final, it, config.iterations);
        loss.backward();
        opt.step(lr);

        rows.push(LossRow {
            iteration: it,
            loss_exist: exist_acc,
            loss_inter: inter_acc,
            lr,
        });
        if config.log_every > 0 && (it % config.log_every == 0 || it + 1 == config.iterations) {
            eprintln!(
                "iter {it:>6}  loss_exist {exist_acc:.5}  loss_inter {inter_acc:.5}  lr {lr:.2e}"
            );
        }
    }

    let loss_log_path = out_dir.join("loss_log.csv");
    {
        let mut f = fs::File::create(&loss_log_path)
            .map_err(|e| Error::io(loss_log_path.display().to_string(), e))?;
        writeln!(f, "iteration,loss_exist,loss_inter,lr")
            .map_err(|e| Error::io(loss_log_path.display().to_string(), e))?;
        for row in &rows {
            writeln!(
                f,
                "{},{},{},{}",
                row.iteration, row.loss_exist, row.loss_inter, row.lr
            )
            .map_err(|e| Error::io(loss_log_path.display().to_string(), e))?;
        }
    }

    let checkpoint_path = out_dir.join("model.ckpt");
    save_checkpoint(
        &checkpoint_path,
        &model,
        serde_json::to_value(config)?,
        config.iterations,
    )?;
    Ok(TrainReport {
        checkpoint_path,
        loss_log_path,
        rows,
    })
}
