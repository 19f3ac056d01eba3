//! Assembly of the three stages into one model, plus the flow bookkeeping
//! shared by training and inference: flows are estimated once per adjacent
//! LR pair and reused by propagation, temporal modulation and the
//! pseudo-label loss.

use crate::counters;
use crate::error::{Error, Result};
use crate::flow::{forward_splat, FlowEstimator, FlowField, PyramidFlow, SplatMode};
use crate::propagation::{BidirPropagation, FeatureExtractor};
use crate::temporal::TemporalInterp;
use crate::tensor::Tensor;
use crate::upsample::{CascadeUpsampler, ScaleSpec};
use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Structural switches; stored in the checkpoint manifest.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct ModelConfig {
    /// Scale-aware conditioning in feature extraction (off in mode=fix).
    pub scale_conditioning: bool,
    /// Forward-warping guidance in the temporal stage.
    pub use_fwg: bool,
    /// Deformable refinement in the temporal stage.
    pub use_da: bool,
    /// Weight initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale_conditioning: true,
            use_fwg: true,
            use_da: true,
            seed: 0,
        }
    }
}

/// The complete space-time super-resolution network.
pub struct SpaceTimeModel {
    pub extractor: FeatureExtractor,
    pub propagation: BidirPropagation,
    pub temporal: TemporalInterp,
    pub upsampler: CascadeUpsampler,
    pub estimator: PyramidFlow,
    pub config: ModelConfig,
}

impl SpaceTimeModel {
    pub fn new(config: ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut extractor = FeatureExtractor::new(&mut rng);
        extractor.set_conditioning(config.scale_conditioning);
        let mut temporal = TemporalInterp::new(&mut rng);
        temporal.use_fwg = config.use_fwg;
        temporal.use_da = config.use_da;
        SpaceTimeModel {
            extractor,
            propagation: BidirPropagation::new(&mut rng),
            temporal,
            upsampler: CascadeUpsampler::new(&mut rng),
            estimator: PyramidFlow::default(),
            config,
        }
    }

    /// All trainable parameters with checkpoint-segment prefixes.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.extractor.collect_params("propagation.extractor", &mut out);
        self.propagation.collect_params("propagation.bidir", &mut out);
        self.temporal.collect_params("temporal", &mut out);
        self.upsampler.collect_params("upsampler", &mut out);
        out
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    /// Estimates both flow directions for every adjacent pair. Each pair
    /// counts as one estimation; all stages reuse the result.
    pub fn compute_flow_pairs(
        &self,
        frames: &[Array3<f64>],
    ) -> Result<(Vec<FlowField>, Vec<FlowField>)> {
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for i in 0..frames.len().saturating_sub(1) {
            counters::bump(&counters::FLOW_PAIR_ESTIMATIONS, 1);
            let mut v01 = self.estimator.estimate(&frames[i], &frames[i + 1])?;
            let mut v10 = self.estimator.estimate(&frames[i + 1], &frames[i])?;
            v01.src_time = 0.0;
            v01.dst_time = 1.0;
            v10.src_time = 1.0;
            v10.dst_time = 0.0;
            fwd.push(v01);
            bwd.push(v10);
        }
        Ok((fwd, bwd))
    }

    /// Image-space base frame for an intermediate time: both LR frames are
    /// forward-splatted toward `t`, averaged with temporal-proximity weights
    /// where both are valid, and holes fall back to the linear frame blend.
    pub fn base_for_t(
        &self,
        frame0: &Array3<f64>,
        frame1: &Array3<f64>,
        v01: &FlowField,
        v10: &FlowField,
        t: f64,
    ) -> Result<Array3<f64>> {
        let (c0, m0) = forward_splat(frame0, &v01.scaled(t), &SplatMode::Average)?;
        let (c1, m1) = forward_splat(frame1, &v10.scaled(1.0 - t), &SplatMode::Average)?;
        let (c, h, w) = frame0.dim();
        let mut out = Array3::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let w0 = (1.0 - t) * m0.data[[0, y, x]];
                let w1 = t * m1.data[[0, y, x]];
                let denom = w0 + w1;
                for ch in 0..c {
                    out[[ch, y, x]] = if denom > 0.0 {
                        (w0 * c0[[ch, y, x]] + w1 * c1[[ch, y, x]]) / denom
                    } else {
                        (1.0 - t) * frame0[[ch, y, x]] + t * frame1[[ch, y, x]]
                    };
                }
            }
        }
        Ok(out)
    }

    /// Guards inference requests against the trained mode: a model trained
    /// with a fixed scale is not scale-conditioned and only serves S = 4.
    pub fn check_scale_supported(&self, scale: &ScaleSpec) -> Result<()> {
        if !self.config.scale_conditioning && (scale.s_h != 4.0 || scale.s_w != 4.0) {
            return Err(Error::invalid(format!(
                "model was trained with a fixed scale of 4 and is not scale-conditioned; \
                 requested ({}, {})",
                scale.s_h, scale.s_w
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_named_and_segmented() {
        let model = SpaceTimeModel::new(ModelConfig::default());
        let params = model.named_params();
        assert!(params.len() > 40);
        for (name, _) in &params {
            assert!(
                name.starts_with("propagation.")
                    || name.starts_with("temporal.")
                    || name.starts_with("upsampler."),
                "unexpected segment for {name}"
            );
        }
        // names must be unique
        let mut names: Vec<&String> = params.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), params.len());
    }

    #[test]
    fn same_seed_same_weights() {
        let a = SpaceTimeModel::new(ModelConfig::default());
        let b = SpaceTimeModel::new(ModelConfig::default());
        for ((_, pa), (_, pb)) in a.named_params().iter().zip(b.named_params().iter()) {
            assert_eq!(pa.to_array(), pb.to_array());
        }
    }

    #[test]
    fn base_for_t_static_scene_is_identity() {
        let model = SpaceTimeModel::new(ModelConfig::default());
        let img = Array3::from_shape_fn((3, 8, 8), |(c, y, x)| {
            ((c + 2 * y + 3 * x) % 7) as f64 / 7.0
        });
        let zero = FlowField::zeros(8, 8, 0.0, 1.0);
        let base = model.base_for_t(&img, &img, &zero, &zero, 0.5).unwrap();
        for (a, b) in base.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fix_mode_rejects_other_scales() {
        let model = SpaceTimeModel::new(ModelConfig {
            scale_conditioning: false,
            ..ModelConfig::default()
        });
        assert!(model
            .check_scale_supported(&ScaleSpec::isotropic(2, 2.8).unwrap())
            .is_err());
        assert!(model
            .check_scale_supported(&ScaleSpec::isotropic(2, 4.0).unwrap())
            .is_ok());
    }
}
