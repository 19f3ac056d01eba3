//! Stage 1: bidirectional recurrent feature propagation.
//!
//! A shallow head plus scale-aware residual blocks extract a feature per
//! frame. Two branches then sweep the sequence, backward first: at each step
//! the hidden state is pre-aligned to the current frame by backward warping
//! with the inter-frame flow, refined by deformable sampling whose offsets
//! are predicted from the warped hidden state and the current feature, and
//! fused with the current feature through residual blocks. The per-frame
//! output fuses both hidden states with a skip connection from the
//! extracted features.
//!
//! Both the step update and the output fusion are zero-initialized
//! residuals on the current feature, so an untrained network propagates
//! features unchanged; that keeps early recurrent training stable and makes
//! a static zero-flow sequence produce identical outputs for every frame.

use crate::error::{Error, Result};
use crate::flow::{backward_warp_t, deformable_sample, FlowField};
use crate::nn::{lrelu, Conv2dLayer, ResidualBlock};
use crate::tensor::{add, concat_ch, slice_ch, Tensor};
use crate::upsample::{ScaleAwareBlock, ScaleSpec};
use crate::FEATURE_CHANNELS;
use ndarray::{Array3, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;

const DCN_KERNEL: usize = 3;
const OFFSET_CH: usize = 2 * DCN_KERNEL * DCN_KERNEL;
const MASK_CH: usize = DCN_KERNEL * DCN_KERNEL;

/// A per-frame feature map with its position in the sequence.
pub struct FeatureMap {
    pub data: Tensor,
    pub frame_index: usize,
    pub time: f64,
}

/// Recurrent hidden state of one propagation branch.
pub struct PropagationState {
    pub hidden: Tensor,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Shallow feature head: one convolution and five scale-aware residual
/// blocks, all at input resolution.
pub struct FeatureExtractor {
    pub head: Conv2dLayer,
    pub blocks: Vec<ScaleAwareBlock>,
}

pub const EXTRACT_BLOCKS: usize = 5;

impl FeatureExtractor {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        FeatureExtractor {
            head: Conv2dLayer::new(3, FEATURE_CHANNELS, 3, 1, rng),
            blocks: (0..EXTRACT_BLOCKS)
                .map(|_| ScaleAwareBlock::new(FEATURE_CHANNELS, rng))
                .collect(),
        }
    }

    /// Turns scale conditioning off (mode=fix).
    pub fn set_conditioning(&mut self, enabled: bool) {
        for b in &mut self.blocks {
            b.conditioning_enabled = enabled;
        }
    }

    pub fn extract_one(&self, frame: &Array3<f64>, scale: &ScaleSpec) -> Tensor {
        let x = Tensor::constant(frame.clone().into_dyn());
        let mut f = lrelu(&self.head.forward(&x));
        for block in &self.blocks {
            f = block.forward(&f, scale);
        }
        f
    }

    /// One feature map per frame, conditioned on the target scale.
    pub fn extract(&self, frames: &[Array3<f64>], scale: &ScaleSpec) -> Result<Vec<Tensor>> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("extract_features"));
        }
        Ok(frames.iter().map(|f| self.extract_one(f, scale)).collect())
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.head.collect_params(&format!("{prefix}.head"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
    }
}

/// One direction of the recurrence.
pub struct PropagationBranch {
    offset_head1: Conv2dLayer,
    offset_head2: Conv2dLayer,
    dcn_w: Tensor,
    dcn_b: Tensor,
    fuse: Conv2dLayer,
    blocks: Vec<ResidualBlock>,
    update_out: Conv2dLayer,
}

pub const FUSION_BLOCKS: usize = 2;

impl PropagationBranch {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        let bound = 1.0 / ((c * DCN_KERNEL * DCN_KERNEL) as f64).sqrt();
        let n = c * c * DCN_KERNEL * DCN_KERNEL;
        let w: Vec<f64> = (0..n)
            .map(|_| rand::Rng::gen_range(rng, -bound..bound))
            .collect();
        PropagationBranch {
            offset_head1: Conv2dLayer::new(2 * c, c, 3, 1, rng),
            offset_head2: Conv2dLayer::new_zeroed(c, OFFSET_CH + MASK_CH, 3, 1),
            dcn_w: Tensor::param(
                ArrayD::from_shape_vec(IxDyn(&[c, c, DCN_KERNEL, DCN_KERNEL]), w).unwrap(),
            ),
            dcn_b: Tensor::param(ArrayD::zeros(IxDyn(&[c]))),
            fuse: Conv2dLayer::new(2 * c, c, 1, 1, rng),
            blocks: (0..FUSION_BLOCKS)
                .map(|_| ResidualBlock::new(c, rng))
                .collect(),
            update_out: Conv2dLayer::new_zeroed(c, c, 1, 1),
        }
    }

    /// Advances the hidden state onto the current frame. `flow` maps the
    /// current frame onto the one the hidden state came from; `None` at the
    /// sequence boundary.
    pub fn step(
        &self,
        hidden: &Tensor,
        feat: &Tensor,
        flow: Option<&FlowField>,
    ) -> Result<Tensor> {
        let h_warped = match flow {
            Some(f) => backward_warp_t(hidden, &Tensor::constant(f.data.clone().into_dyn()))?,
            None => hidden.clone(),
        };
        let raw = self
            .offset_head2
            .forward(&lrelu(&self.offset_head1.forward(&concat_ch(&[&h_warped, feat]))));
        let offsets = slice_ch(&raw, 0, OFFSET_CH);
        let mask = slice_ch(&raw, OFFSET_CH, OFFSET_CH + MASK_CH);
        let h_aligned =
            deformable_sample(&h_warped, &offsets, &mask, &self.dcn_w, Some(&self.dcn_b))?;
        let mut fused = lrelu(&self.fuse.forward(&concat_ch(&[&h_aligned, feat])));
        for block in &self.blocks {
            fused = block.forward(&fused);
        }
        Ok(add(feat, &self.update_out.forward(&fused)))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.offset_head1
            .collect_params(&format!("{prefix}.offset_head1"), out);
        self.offset_head2
            .collect_params(&format!("{prefix}.offset_head2"), out);
        out.push((format!("{prefix}.dcn_w"), self.dcn_w.clone()));
        out.push((format!("{prefix}.dcn_b"), self.dcn_b.clone()));
        self.fuse.collect_params(&format!("{prefix}.fuse"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect_params(&format!("{prefix}.block{i}"), out);
        }
        self.update_out
            .collect_params(&format!("{prefix}.update_out"), out);
    }

    fn copy_from(&self, other: &PropagationBranch) {
        let mut mine = Vec::new();
        let mut theirs = Vec::new();
        self.collect_params("b", &mut mine);
        other.collect_params("b", &mut theirs);
        for ((_, dst), (_, src)) in mine.iter().zip(theirs.iter()) {
            dst.set_data(src.to_array());
        }
    }
}

/// Both branches plus the skip-connected output fusion.
pub struct BidirPropagation {
    pub backward_branch: PropagationBranch,
    pub forward_branch: PropagationBranch,
    fusion1: Conv2dLayer,
    fusion_block: ResidualBlock,
    fusion_out: Conv2dLayer,
}

impl BidirPropagation {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        BidirPropagation {
            backward_branch: PropagationBranch::new(rng),
            forward_branch: PropagationBranch::new(rng),
            fusion1: Conv2dLayer::new(3 * c, c, 1, 1, rng),
            fusion_block: ResidualBlock::new(c, rng),
            fusion_out: Conv2dLayer::new_zeroed(c, c, 1, 1),
        }
    }

    /// Runs the backward sweep (frame N-1 to 0), then the forward sweep, and
    /// fuses per frame. `flows_fwd[i]` maps frame `i` onto `i+1`,
    /// `flows_bwd[i]` maps frame `i+1` onto `i`; both lists have `N-1`
    /// entries.
    pub fn propagate(
        &self,
        features: &[Tensor],
        flows_fwd: &[FlowField],
        flows_bwd: &[FlowField],
    ) -> Result<Vec<Tensor>> {
        let n = features.len();
        if n == 0 {
            return Err(Error::EmptyInput("propagate"));
        }
        if flows_fwd.len() != n - 1 || flows_bwd.len() != n - 1 {
            return Err(Error::ShapeMismatch {
                context: "propagate flow lists",
                expected: vec![n - 1],
                got: vec![flows_fwd.len(), flows_bwd.len()],
            });
        }
        let zeros = Tensor::zeros(&features[0].shape());

        let mut bwd: Vec<Option<Tensor>> = vec![None; n];
        let mut hidden = zeros.clone();
        for i in (0..n).rev() {
            // moving from frame i+1 to frame i: v_{i->i+1} pulls the hidden
            // state back onto frame i
            let flow = if i + 1 < n { Some(&flows_fwd[i]) } else { None };
            hidden = self.backward_branch.step(&hidden, &features[i], flow)?;
            bwd[i] = Some(hidden.clone());
        }

        let mut fwd: Vec<Option<Tensor>> = vec![None; n];
        let mut hidden = zeros;
        for i in 0..n {
            let flow = if i > 0 { Some(&flows_bwd[i - 1]) } else { None };
            hidden = self.forward_branch.step(&hidden, &features[i], flow)?;
            fwd[i] = Some(hidden.clone());
        }

        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let b = bwd[i].take().unwrap();
            let f = fwd[i].take().unwrap();
            let cat = concat_ch(&[&b, &f, &features[i]]);
            let fused = self
                .fusion_out
                .forward(&self.fusion_block.forward(&lrelu(&self.fusion1.forward(&cat))));
            out.push(add(&features[i], &fused));
        }
        Ok(out)
    }

    /// Test hook: shares the branch weights and symmetrizes the fusion in
    /// its two hidden-state blocks, making temporal flips exact mirrors.
    pub fn tie_direction_weights(&mut self) {
        self.forward_branch.copy_from(&self.backward_branch);
        let c = FEATURE_CHANNELS;
        let mut w = self.fusion1.weight.to_array();
        for co in 0..w.shape()[0] {
            for ci in 0..c {
                let v = w[[co, ci, 0, 0]];
                w[[co, c + ci, 0, 0]] = v;
            }
        }
        self.fusion1.weight.set_data(w);
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.backward_branch
            .collect_params(&format!("{prefix}.backward"), out);
        self.forward_branch
            .collect_params(&format!("{prefix}.forward"), out);
        self.fusion1
            .collect_params(&format!("{prefix}.fusion1"), out);
        self.fusion_block
            .collect_params(&format!("{prefix}.fusion_block"), out);
        self.fusion_out
            .collect_params(&format!("{prefix}.fusion_out"), out);
    }
}
