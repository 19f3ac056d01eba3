//! Stage 3: memory-frugal scale-arbitrary upsampling.
//!
//! Three depth-to-space branches (x2, x4, x8) run in parallel: each projects
//! the feature map to `C * r^2` channels, shuffles depth into space, receives
//! a coordinate-conditioned offset map and is bilinearly resampled to the
//! exact target size. The concatenated branches are fused into a 3-channel
//! residual on top of the bilinearly upsampled base frame. No per-pixel
//! filter bank is ever materialized; peak memory is bounded by the three
//! fixed-size branch tensors.

use crate::error::{Error, Result};
use crate::nn::{lrelu, Conv2dLayer, LinearLayer};
use crate::tensor::{
    add, add_channel_tiled, bilinear_resize, clamp01, concat_ch, mul_channels, pixel_shuffle,
    tanh, Tensor,
};
use crate::FEATURE_CHANNELS;
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

/// Temporal factor and fractional spatial factors.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScaleSpec {
    pub r: usize,
    pub s_h: f64,
    pub s_w: f64,
}

impl ScaleSpec {
    pub fn new(r: usize, s_h: f64, s_w: f64) -> Result<Self> {
        if r < 1 {
            return Err(Error::invalid("temporal factor must be >= 1"));
        }
        if !(1.0..=8.0).contains(&s_h) || !(1.0..=8.0).contains(&s_w) {
            return Err(Error::invalid(format!(
                "spatial factors must lie in [1, 8], got ({s_h}, {s_w})"
            )));
        }
        Ok(ScaleSpec { r, s_h, s_w })
    }

    pub fn isotropic(r: usize, s: f64) -> Result<Self> {
        ScaleSpec::new(r, s, s)
    }

    /// Output size for an `(h, w)` input: `(ceil(h*s_h), ceil(w*s_w))`.
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h as f64 * self.s_h).ceil() as usize,
            (w as f64 * self.s_w).ceil() as usize,
        )
    }
}

/// Relative position of each output pixel inside its source cell.
#[derive(Clone, Debug)]
pub struct OffsetMap {
    /// `[2, H', W']`: channel 0 = Dis_x, channel 1 = Dis_y, in `[-0.5, 0.5)`.
    pub dis: Array3<f64>,
    /// `[2, H', W']`: integer source coordinates (channel 0 = x, 1 = y).
    pub coords: Array3<i64>,
}

/// For every output pixel `sigma` along each axis:
/// `LR(sigma) = (sigma + 0.5)/S - 0.5`, `Dis = LR(sigma) - floor((sigma + 0.5)/S)`.
pub fn relative_offsets(h_out: usize, w_out: usize, s_h: f64, s_w: f64) -> Result<OffsetMap> {
    if s_h <= 0.0 || s_w <= 0.0 {
        return Err(Error::invalid("scales must be positive"));
    }
    let mut dis = Array3::zeros((2, h_out, w_out));
    let mut coords = Array3::zeros((2, h_out, w_out));
    for y in 0..h_out {
        for x in 0..w_out {
            let qx = (x as f64 + 0.5) / s_w;
            let qy = (y as f64 + 0.5) / s_h;
            dis[[0, y, x]] = (qx - 0.5) - qx.floor();
            dis[[1, y, x]] = (qy - 0.5) - qy.floor();
            coords[[0, y, x]] = qx.floor() as i64;
            coords[[1, y, x]] = qy.floor() as i64;
        }
    }
    Ok(OffsetMap { dis, coords })
}

/// Per-pixel MLP over `(Dis_x, Dis_y, S_H, S_W)` producing a 2-channel delta
/// bounded to one LR pixel by tanh. Realized as 1x1 convolutions; the output
/// layer is zero-initialized so the delta vanishes until trained.
pub struct ScaleMlp {
    l1: Conv2dLayer,
    l2: Conv2dLayer,
    out: Conv2dLayer,
}

impl ScaleMlp {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        ScaleMlp {
            l1: Conv2dLayer::new(4, 16, 1, 1, rng),
            l2: Conv2dLayer::new(16, 16, 1, 1, rng),
            out: Conv2dLayer::new_zeroed(16, 2, 1, 1),
        }
    }

    pub fn forward(&self, dis: &OffsetMap, scale: &ScaleSpec) -> Tensor {
        let (_, h, w) = dis.dis.dim();
        let mut input = ArrayD::zeros(IxDyn(&[4, h, w]));
        for y in 0..h {
            for x in 0..w {
                input[[0, y, x]] = dis.dis[[0, y, x]];
                input[[1, y, x]] = dis.dis[[1, y, x]];
                input[[2, y, x]] = scale.s_h;
                input[[3, y, x]] = scale.s_w;
            }
        }
        let x = Tensor::constant(input);
        let h1 = lrelu(&self.l1.forward(&x));
        let h2 = lrelu(&self.l2.forward(&h1));
        tanh(&self.out.forward(&h2))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.l1.collect_params(&format!("{prefix}.l1"), out);
        self.l2.collect_params(&format!("{prefix}.l2"), out);
        self.out.collect_params(&format!("{prefix}.out"), out);
    }
}

/// Residual block whose input is first modulated per channel by a factor
/// predicted from the scale pair. The modulation MLP's output layer starts
/// at zero with the modulation anchored at one, so an untrained block is a
/// plain residual block.
pub struct ScaleAwareBlock {
    pub mlp1: LinearLayer,
    pub mlp2: LinearLayer,
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    /// Test hook and mode=fix switch: modulation forced to one.
    pub conditioning_enabled: bool,
}

impl ScaleAwareBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ScaleAwareBlock {
            mlp1: LinearLayer::new(2, 16, rng),
            mlp2: LinearLayer::new_zeroed(16, channels),
            conv1: Conv2dLayer::new(channels, channels, 3, 1, rng),
            conv2: Conv2dLayer::new(channels, channels, 3, 1, rng),
            conditioning_enabled: true,
        }
    }

    pub fn modulation(&self, scale: &ScaleSpec) -> Tensor {
        let s = Tensor::from_vec(vec![scale.s_h, scale.s_w], &[2]);
        let h = lrelu(&self.mlp1.forward(&s));
        // anchored at one: zero-initialized head means no modulation
        crate::tensor::add_scalar(&self.mlp2.forward(&h), 1.0)
    }

    pub fn forward(&self, x: &Tensor, scale: &ScaleSpec) -> Tensor {
        let modulated = if self.conditioning_enabled {
            mul_channels(x, &self.modulation(scale))
        } else {
            x.clone()
        };
        let y = self.conv2.forward(&lrelu(&self.conv1.forward(&modulated)));
        add(x, &y)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.mlp1.collect_params(&format!("{prefix}.mlp1"), out);
        self.mlp2.collect_params(&format!("{prefix}.mlp2"), out);
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
    }
}

/// The cascaded depth-to-space upsampler.
pub struct CascadeUpsampler {
    branch_proj: Vec<Conv2dLayer>,
    pub scale_mlp: ScaleMlp,
    fuse1: Conv2dLayer,
    fuse2: Conv2dLayer,
}

/// Branch shuffle factors (2^l for the three cascade levels).
pub const BRANCH_FACTORS: [usize; 3] = [2, 4, 8];

impl CascadeUpsampler {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        let branch_proj = BRANCH_FACTORS
            .iter()
            .map(|&r| Conv2dLayer::new(c, c * r * r, 1, 1, rng))
            .collect();
        CascadeUpsampler {
            branch_proj,
            scale_mlp: ScaleMlp::new(rng),
            fuse1: Conv2dLayer::new(3 * c, c, 1, 1, rng),
            // zero tail makes the whole module a pure residual on the
            // bilinearly upsampled base frame
            fuse2: Conv2dLayer::new_zeroed(c, 3, 3, 1),
        }
    }

    /// Upsamples one feature map to `(ceil(H*s_h), ceil(W*s_w))` RGB, adding
    /// the result as a residual on the bilinearly resized `base_frame`.
    pub fn upsample(
        &self,
        feat: &Tensor,
        scale: &ScaleSpec,
        base_frame: &Array3<f64>,
    ) -> Result<Tensor> {
        let fs = feat.shape();
        if fs.len() != 3 || fs[0] != FEATURE_CHANNELS {
            return Err(Error::ShapeMismatch {
                context: "upsample features",
                expected: vec![FEATURE_CHANNELS],
                got: fs,
            });
        }
        if !(1.0..=8.0).contains(&scale.s_h) || !(1.0..=8.0).contains(&scale.s_w) {
            return Err(Error::invalid(format!(
                "spatial factors must lie in [1, 8], got ({}, {})",
                scale.s_h, scale.s_w
            )));
        }
        let (h, w) = (fs[1], fs[2]);
        if base_frame.dim() != (3, h, w) {
            return Err(Error::ShapeMismatch {
                context: "upsample base frame",
                expected: vec![3, h, w],
                got: base_frame.shape().to_vec(),
            });
        }
        let (h_out, w_out) = scale.output_size(h, w);

        let offsets = relative_offsets(h_out, w_out, scale.s_h, scale.s_w)?;
        let delta = self.scale_mlp.forward(&offsets, scale);

        let mut branches = Vec::with_capacity(BRANCH_FACTORS.len());
        for (proj, &r) in self.branch_proj.iter().zip(BRANCH_FACTORS.iter()) {
            let expanded = proj.forward(feat);
            let shuffled = pixel_shuffle(&expanded, r);
            let delta_r = bilinear_resize(&delta, r * h, r * w);
            let adapted = add_channel_tiled(&shuffled, &delta_r);
            branches.push(bilinear_resize(&adapted, h_out, w_out));
        }
        let branch_refs: Vec<&Tensor> = branches.iter().collect();
        let fused = self.fuse2.forward(&lrelu(&self.fuse1.forward(&concat_ch(&branch_refs))));

        let base = Tensor::constant(base_frame.clone().into_dyn());
        let base_up = bilinear_resize(&base, h_out, w_out);
        Ok(clamp01(&add(&fused, &base_up)))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, proj) in self.branch_proj.iter().enumerate() {
            proj.collect_params(&format!("{prefix}.branch{}", BRANCH_FACTORS[i]), out);
        }
        self.scale_mlp
            .collect_params(&format!("{prefix}.scale_mlp"), out);
        self.fuse1.collect_params(&format!("{prefix}.fuse1"), out);
        self.fuse2.collect_params(&format!("{prefix}.fuse2"), out);
    }
}
