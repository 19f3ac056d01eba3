//! Stage 2: forward-warping-guided alignment (FWGA).
//!
//! The feature of an arbitrary intermediate time `t` is synthesized from two
//! adjacent propagated features, coarse to fine over a three-level pyramid:
//! softmax-splat both features toward `t`, fill each side's holes from the
//! other side, refine the pair with deformable sampling whose offsets are
//! predicted jointly (the coarser level's offsets, upsampled and doubled,
//! act as a prior), and blend the two aligned features with a learned
//! sigmoid gate at the finest level.

use crate::counters;
use crate::error::{Error, Result};
use crate::flow::{backward_warp, deformable_sample, forward_splat_t, FlowField, HoleMask};
use crate::nn::{lrelu, Conv2dLayer};
use crate::tensor::{
    add, add_scalar, bilinear_resize, concat_ch, mul_bcast, mul_scalar, mul_scalar_tensor, neg,
    sigmoid, slice_ch, Tensor,
};
use crate::FEATURE_CHANNELS;
use ndarray::{Array3, ArrayD, Ix3, IxDyn};
use rand_chacha::ChaCha8Rng;

const DCN_KERNEL: usize = 3;
const OFFSET_CH: usize = 2 * DCN_KERNEL * DCN_KERNEL;
const MASK_CH: usize = DCN_KERNEL * DCN_KERNEL;

/// Three-level feature stack; level `l` is roughly half the size of `l-1`
/// (ceil division via stride-2 convolution).
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

/// Builds the pyramid: one stride-1 convolution at level 0, then two
/// stride-2 convolutions.
pub struct PyramidBuilder {
    pub conv0: Conv2dLayer,
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
}

impl PyramidBuilder {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        PyramidBuilder {
            conv0: Conv2dLayer::new(c, c, 3, 1, rng),
            conv1: Conv2dLayer::new(c, c, 3, 2, rng),
            conv2: Conv2dLayer::new(c, c, 3, 2, rng),
        }
    }

    pub fn build(&self, feat: &Tensor) -> Result<FeaturePyramid> {
        let s = feat.shape();
        if s[1] < 4 || s[2] < 4 {
            return Err(Error::invalid(format!(
                "pyramid input must be at least 4x4, got {}x{}",
                s[1], s[2]
            )));
        }
        let l0 = self.conv0.forward(feat);
        let l1 = self.conv1.forward(&lrelu(&l0));
        let l2 = self.conv2.forward(&lrelu(&l1));
        Ok(FeaturePyramid {
            levels: vec![l0, l1, l2],
        })
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv0.collect_params(&format!("{prefix}.conv0"), out);
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
    }
}

/// Splat importance: negative per-pixel mean absolute difference between a
/// feature map and the backward-warped opposite feature, detached. The
/// learnable scalar `beta` scales it inside the graph.
fn photometric_importance(src: &Tensor, opposite: &Tensor, flow: &FlowField) -> Result<Array3<f64>> {
    let opp = opposite
        .to_array()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::invalid("importance expects [C,H,W]"))?;
    let warped = backward_warp(&opp, flow)?;
    let srcd = src.data();
    let (c, h, w) = warped.dim();
    let mut z = Array3::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for ch in 0..c {
                acc += (srcd[[ch, y, x]] - warped[[ch, y, x]]).abs();
            }
            z[[0, y, x]] = -acc / c as f64;
        }
    }
    Ok(z)
}

/// Eq.-level FWGA warp at one pyramid level: pre-scaled softmax splats of
/// both features toward `t`, then complementary hole filling.
///
/// Returns `(F0t, F1t, M0, M1)`. Swapping `(F0, v01, t)` with
/// `(F1, v10, 1-t)` swaps the output pairs exactly.
pub fn fwga_warp_level(
    f0: &Tensor,
    f1: &Tensor,
    v01: &FlowField,
    v10: &FlowField,
    t: f64,
    beta: &Tensor,
) -> Result<(Tensor, Tensor, HoleMask, HoleMask)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!(
            "intermediate time must lie in (0,1), got {t}"
        )));
    }
    if f0.shape() != f1.shape() {
        return Err(Error::ShapeMismatch {
            context: "fwga_warp_level",
            expected: f0.shape(),
            got: f1.shape(),
        });
    }
    let z0 = mul_scalar_tensor(
        &Tensor::constant(photometric_importance(f0, f1, v01)?.into_dyn()),
        beta,
    );
    let z1 = mul_scalar_tensor(
        &Tensor::constant(photometric_importance(f1, f0, v10)?.into_dyn()),
        beta,
    );
    let (s0, m0) = forward_splat_t(f0, &v01.scaled(t), true, Some(&z0))?;
    let (s1, m1) = forward_splat_t(f1, &v10.scaled(1.0 - t), true, Some(&z1))?;
    // pre-scaling happens before hole filling
    let f0t_tilde = mul_scalar(&s0, t);
    let f1t_tilde = mul_scalar(&s1, 1.0 - t);
    let f0t = add(
        &mul_bcast(&m0.to_tensor(), &f0t_tilde),
        &mul_bcast(&m0.complement_tensor(), &f1t_tilde),
    );
    let f1t = add(
        &mul_bcast(&m1.to_tensor(), &f1t_tilde),
        &mul_bcast(&m1.complement_tensor(), &f0t_tilde),
    );
    Ok((f0t, f1t, m0, m1))
}

/// Upsamples a coarser level's offset field to the next finer grid,
/// doubling the displacement magnitudes.
pub fn upsample_offset_prior(prev: &Tensor, h: usize, w: usize) -> Tensor {
    mul_scalar(&bilinear_resize(prev, h, w), 2.0)
}

/// Per-level deformable refinement. One head predicts a shared offset field
/// plus modulation logits from both warped features and the upsampled
/// coarser-level prior; each branch has its own sampling kernel.
pub struct RefineLevel {
    pub head1: Conv2dLayer,
    pub head2: Conv2dLayer,
    pub dcn_w0: Tensor,
    pub dcn_b0: Tensor,
    pub dcn_w1: Tensor,
    pub dcn_b1: Tensor,
}

impl RefineLevel {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let c = FEATURE_CHANNELS;
        let dcn = |rng: &mut ChaCha8Rng| {
            let bound = 1.0 / ((c * DCN_KERNEL * DCN_KERNEL) as f64).sqrt();
            let n = c * c * DCN_KERNEL * DCN_KERNEL;
            let v: Vec<f64> = (0..n)
                .map(|_| rand::Rng::gen_range(rng, -bound..bound))
                .collect();
            Tensor::param(
                ArrayD::from_shape_vec(IxDyn(&[c, c, DCN_KERNEL, DCN_KERNEL]), v).unwrap(),
            )
        };
        RefineLevel {
            head1: Conv2dLayer::new(2 * c + OFFSET_CH, c, 3, 1, rng),
            // zero-initialized: refinement starts as pure flow-based warping
            head2: Conv2dLayer::new_zeroed(c, OFFSET_CH + MASK_CH, 3, 1),
            dcn_w0: dcn(rng),
            dcn_b0: Tensor::param(ArrayD::zeros(IxDyn(&[c]))),
            dcn_w1: dcn(rng),
            dcn_b1: Tensor::param(ArrayD::zeros(IxDyn(&[c]))),
        }
    }

    /// Returns `(aligned0, aligned1, offsets)`.
    pub fn forward(
        &self,
        f0t: &Tensor,
        f1t: &Tensor,
        prior: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        let s = f0t.shape();
        let (h, w) = (s[1], s[2]);
        let prior_up = match prior {
            Some(p) => upsample_offset_prior(p, h, w),
            // the coarsest level omits the prior term
            None => Tensor::zeros(&[OFFSET_CH, h, w]),
        };
        let raw = self
            .head2
            .forward(&lrelu(&self.head1.forward(&concat_ch(&[f0t, f1t, &prior_up]))));
        let offsets = slice_ch(&raw, 0, OFFSET_CH);
        let mask = slice_ch(&raw, OFFSET_CH, OFFSET_CH + MASK_CH);
        let a0 = deformable_sample(f0t, &offsets, &mask, &self.dcn_w0, Some(&self.dcn_b0))?;
        let a1 = deformable_sample(f1t, &offsets, &mask, &self.dcn_w1, Some(&self.dcn_b1))?;
        Ok((a0, a1, offsets))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.head1.collect_params(&format!("{prefix}.head1"), out);
        self.head2.collect_params(&format!("{prefix}.head2"), out);
        out.push((format!("{prefix}.dcn_w0"), self.dcn_w0.clone()));
        out.push((format!("{prefix}.dcn_b0"), self.dcn_b0.clone()));
        out.push((format!("{prefix}.dcn_w1"), self.dcn_w1.clone()));
        out.push((format!("{prefix}.dcn_b1"), self.dcn_b1.clone()));
    }
}

/// `F_t = W (x) aligned0 + (1 - W) (x) aligned1` with
/// `W = sigmoid(conv([aligned0, aligned1]))`.
pub struct BlendLayer {
    pub conv: Conv2dLayer,
}

impl BlendLayer {
    pub fn new(_rng: &mut ChaCha8Rng) -> Self {
        BlendLayer {
            // zero weights: the gate starts balanced at 0.5
            conv: Conv2dLayer::new_zeroed(2 * FEATURE_CHANNELS, 1, 3, 1),
        }
    }

    pub fn forward(&self, aligned0: &Tensor, aligned1: &Tensor) -> Tensor {
        let gate = sigmoid(&self.conv.forward(&concat_ch(&[aligned0, aligned1])));
        let anti = add_scalar(&neg(&gate), 1.0);
        add(&mul_bcast(&gate, aligned0), &mul_bcast(&anti, aligned1))
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv.collect_params(&format!("{prefix}.conv"), out);
    }
}

/// The full temporal modulation stage.
pub struct TemporalInterp {
    pub pyramid: PyramidBuilder,
    pub refine: Vec<RefineLevel>,
    pub blend: BlendLayer,
    pub beta: Tensor,
    /// Forward-warping guidance; without it the pyramids feed the
    /// refinement directly.
    pub use_fwg: bool,
    /// Deformable refinement; without it the warped features are blended
    /// as they are.
    pub use_da: bool,
}

impl TemporalInterp {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        TemporalInterp {
            pyramid: PyramidBuilder::new(rng),
            refine: (0..3).map(|_| RefineLevel::new(rng)).collect(),
            blend: BlendLayer::new(rng),
            beta: Tensor::param(ArrayD::from_elem(IxDyn(&[1]), 1.0)),
            use_fwg: true,
            use_da: true,
        }
    }

    /// Synthesizes the feature at time `t` between two propagated features.
    pub fn interpolate_feature(
        &self,
        f0: &Tensor,
        f1: &Tensor,
        v01: &FlowField,
        v10: &FlowField,
        t: f64,
    ) -> Result<Tensor> {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!(
                "intermediate time must lie in (0,1), got {t}"
            )));
        }
        counters::bump(&counters::TEMPORAL_INTERPOLATIONS, 1);
        let pyr0 = self.pyramid.build(f0)?;
        let pyr1 = self.pyramid.build(f1)?;
        let mut prior: Option<Tensor> = None;
        let mut finest: Option<(Tensor, Tensor)> = None;
        for level in (0..3).rev() {
            let s = pyr0.levels[level].shape();
            let (h, w) = (s[1], s[2]);
            let v01_l = v01.resized(h, w);
            let v10_l = v10.resized(h, w);
            let (f0t, f1t) = if self.use_fwg {
                let (f0t, f1t, _, _) = fwga_warp_level(
                    &pyr0.levels[level],
                    &pyr1.levels[level],
                    &v01_l,
                    &v10_l,
                    t,
                    &self.beta,
                )?;
                (f0t, f1t)
            } else {
                (pyr0.levels[level].clone(), pyr1.levels[level].clone())
            };
            let (a0, a1) = if self.use_da {
                let (a0, a1, offsets) =
                    self.refine[level].forward(&f0t, &f1t, prior.as_ref())?;
                prior = Some(offsets);
                (a0, a1)
            } else {
                (f0t, f1t)
            };
            if level == 0 {
                finest = Some((a0, a1));
            }
        }
        let (a0, a1) = finest.expect("level 0 always runs");
        Ok(self.blend.forward(&a0, &a1))
    }

    /// Test hook: ties the weights so that swapping the two inputs together
    /// with their flows at `t = 0.5` leaves the output invariant. The offset
    /// head becomes symmetric in its two feature blocks, the two sampling
    /// kernels are shared, and the blend gate becomes antisymmetric.
    pub fn tie_symmetric_test_weights(&mut self) {
        let c = FEATURE_CHANNELS;
        for level in &mut self.refine {
            let mut w = level.head1.weight.to_array();
            for co in 0..w.shape()[0] {
                for ci in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let v = w[[co, ci, ky, kx]];
                            w[[co, c + ci, ky, kx]] = v;
                        }
                    }
                }
            }
            level.head1.weight.set_data(w);
            level.dcn_w1.set_data(level.dcn_w0.to_array());
            level.dcn_b1.set_data(level.dcn_b0.to_array());
        }
        let mut bw = self.blend.conv.weight.to_array();
        for co in 0..bw.shape()[0] {
            for ci in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let v = bw[[co, ci, ky, kx]];
                        bw[[co, c + ci, ky, kx]] = -v;
                    }
                }
            }
        }
        self.blend.conv.weight.set_data(bw);
        self.blend.conv.bias.set_data(ArrayD::zeros(IxDyn(&[1])));
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.pyramid
            .collect_params(&format!("{prefix}.pyramid"), out);
        for (i, level) in self.refine.iter().enumerate() {
            level.collect_params(&format!("{prefix}.refine{i}"), out);
        }
        self.blend.collect_params(&format!("{prefix}.blend"), out);
        out.push((format!("{prefix}.beta"), self.beta.clone()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_feat(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let n = FEATURE_CHANNELS * h * w;
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect();
        Tensor::constant(ArrayD::from_shape_vec(IxDyn(&[FEATURE_CHANNELS, h, w]), v).unwrap())
    }

    fn rand_flow(h: usize, w: usize, mag: f64, rng: &mut ChaCha8Rng) -> FlowField {
        let mut data = Array3::zeros((2, h, w));
        data.mapv_inplace(|_| rng.gen_range(-mag..mag));
        FlowField::new(data, 0.0, 1.0).unwrap()
    }

    #[test]
    fn pyramid_shapes_even_and_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let builder = PyramidBuilder::new(&mut rng);
        let even = rand_feat(32, 32, &mut rng);
        let pyr = builder.build(&even).unwrap();
        assert_eq!(pyr.levels[0].shape(), vec![FEATURE_CHANNELS, 32, 32]);
        assert_eq!(pyr.levels[1].shape(), vec![FEATURE_CHANNELS, 16, 16]);
        assert_eq!(pyr.levels[2].shape(), vec![FEATURE_CHANNELS, 8, 8]);
        let odd = rand_feat(33, 33, &mut rng);
        let pyr = builder.build(&odd).unwrap();
        assert_eq!(pyr.levels[1].shape(), vec![FEATURE_CHANNELS, 17, 17]);
        assert_eq!(pyr.levels[2].shape(), vec![FEATURE_CHANNELS, 9, 9]);
    }

    #[test]
    fn pyramid_identity_convs_keep_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let mut builder = PyramidBuilder::new(&mut rng);
        for conv in [&mut builder.conv0, &mut builder.conv1, &mut builder.conv2] {
            let mut w = ArrayD::zeros(IxDyn(&[FEATURE_CHANNELS, FEATURE_CHANNELS, 3, 3]));
            for c in 0..FEATURE_CHANNELS {
                w[[c, c, 1, 1]] = 1.0;
            }
            conv.weight.set_data(w);
            conv.bias.set_data(ArrayD::zeros(IxDyn(&[FEATURE_CHANNELS])));
        }
        let x = Tensor::constant(ArrayD::from_elem(
            IxDyn(&[FEATURE_CHANNELS, 8, 8]),
            0.42,
        ));
        let pyr = builder.build(&x).unwrap();
        for level in &pyr.levels {
            assert!(level.data().iter().all(|&v| (v - 0.42).abs() < 1e-12));
        }
    }

    #[test]
    fn pyramid_rejects_tiny_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let builder = PyramidBuilder::new(&mut rng);
        let tiny = rand_feat(3, 8, &mut rng);
        assert!(builder.build(&tiny).is_err());
    }

    #[test]
    fn fwga_zero_flow_scales_and_full_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let f0 = rand_feat(6, 6, &mut rng);
        let f1 = rand_feat(6, 6, &mut rng);
        let zero = FlowField::zeros(6, 6, 0.0, 1.0);
        let beta = Tensor::scalar(1.0);
        let t = 0.3;
        let (f0t, f1t, m0, m1) = fwga_warp_level(&f0, &f1, &zero, &zero, t, &beta).unwrap();
        assert_eq!(m0.coverage(), 1.0);
        assert_eq!(m1.coverage(), 1.0);
        let expected0 = f0.data().mapv(|v| v * t);
        let diff0 = (&*f0t.data() - &expected0).mapv(f64::abs).sum();
        assert!(diff0 < 1e-12, "F0t must be t*F0 under zero flow");
        let expected1 = f1.data().mapv(|v| v * (1.0 - t));
        let diff1 = (&*f1t.data() - &expected1).mapv(f64::abs).sum();
        assert!(diff1 < 1e-12);
    }

    #[test]
    fn fwga_holes_take_the_other_side() {
        // branch 0 splats two pixels to the right leaving holes at the left
        // edge; branch 1 stays put and must fill them, keeping its own
        // (1-t) pre-scaling. Applying the scale after filling would give a
        // different value, so this also pins the operation order.
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let f0 = rand_feat(4, 6, &mut rng);
        let f1 = rand_feat(4, 6, &mut rng);
        let t = 0.25;
        let mut v01_data = Array3::zeros((2, 4, 6));
        v01_data.index_axis_mut(ndarray::Axis(0), 0).fill(2.0 / t);
        let v01 = FlowField::new(v01_data, 0.0, 1.0).unwrap();
        let v10 = FlowField::zeros(4, 6, 1.0, 0.0);
        let beta = Tensor::scalar(1.0);
        let (f0t, _, m0, _) = fwga_warp_level(&f0, &f1, &v01, &v10, t, &beta).unwrap();
        for y in 0..4 {
            for x in 0..2 {
                assert_eq!(m0.data[[0, y, x]], 0.0, "expected hole at ({y},{x})");
                for ch in 0..FEATURE_CHANNELS {
                    let expected = (1.0 - t) * f1.data()[[ch, y, x]];
                    let got = f0t.data()[[ch, y, x]];
                    assert!(
                        (got - expected).abs() < 1e-12,
                        "hole fill must carry the (1-t) pre-scaled value"
                    );
                }
            }
        }
    }

    #[test]
    fn fwga_swap_symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(86);
        for _ in 0..5 {
            let f0 = rand_feat(6, 6, &mut rng);
            let f1 = rand_feat(6, 6, &mut rng);
            let v01 = rand_flow(6, 6, 2.0, &mut rng);
            let v10 = rand_flow(6, 6, 2.0, &mut rng);
            let beta = Tensor::scalar(rng.gen_range(0.2..2.0));
            let t = rng.gen_range(0.1..0.9);
            let (f0t, f1t, m0, m1) =
                fwga_warp_level(&f0, &f1, &v01, &v10, t, &beta).unwrap();
            let (g1t, g0t, n1, n0) =
                fwga_warp_level(&f1, &f0, &v10, &v01, 1.0 - t, &beta).unwrap();
            assert_eq!(f0t.to_array(), g0t.to_array());
            assert_eq!(f1t.to_array(), g1t.to_array());
            assert_eq!(m0.data, n0.data);
            assert_eq!(m1.data, n1.data);
        }
    }

    #[test]
    fn fwga_rejects_bad_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(87);
        let f = rand_feat(4, 4, &mut rng);
        let zero = FlowField::zeros(4, 4, 0.0, 1.0);
        let beta = Tensor::scalar(1.0);
        assert!(fwga_warp_level(&f, &f, &zero, &zero, 0.0, &beta).is_err());
        assert!(fwga_warp_level(&f, &f, &zero, &zero, 1.0, &beta).is_err());
    }

    #[test]
    fn offset_prior_doubles_in_magnitude() {
        let prev = Tensor::constant(ArrayD::from_elem(IxDyn(&[OFFSET_CH, 4, 4]), 1.0));
        let up = upsample_offset_prior(&prev, 8, 8);
        assert_eq!(up.shape(), vec![OFFSET_CH, 8, 8]);
        assert!(up.data().iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn refine_zero_init_matches_plain_deformable_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(88);
        let level = RefineLevel::new(&mut rng);
        let f0t = rand_feat(6, 6, &mut rng);
        let f1t = rand_feat(6, 6, &mut rng);
        let (a0, _, offsets) = level.forward(&f0t, &f1t, None).unwrap();
        assert!(offsets.data().iter().all(|&v| v == 0.0));
        // identical to deformable sampling with explicit zero offsets
        let zero_off = Tensor::zeros(&[OFFSET_CH, 6, 6]);
        let zero_mask = Tensor::zeros(&[MASK_CH, 6, 6]);
        let direct =
            deformable_sample(&f0t, &zero_off, &zero_mask, &level.dcn_w0, Some(&level.dcn_b0))
                .unwrap();
        assert_eq!(a0.to_array(), direct.to_array());
    }

    #[test]
    fn refine_gradients_reach_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(89);
        let level = RefineLevel::new(&mut rng);
        // push the head away from zero so offsets are non-trivial
        let mut w = level.head2.weight.to_array();
        w.mapv_inplace(|_| rng.gen_range(-0.05..0.05));
        level.head2.weight.set_data(w);
        let f0t = rand_feat(6, 6, &mut rng);
        let f1t = rand_feat(6, 6, &mut rng);
        let (a0, a1, _) = level.forward(&f0t, &f1t, None).unwrap();
        let loss = crate::tensor::mean_all(&crate::tensor::mul(&a0, &a1));
        loss.backward();
        let g = level.head2.weight.grad().expect("offset head needs gradients");
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn blend_convex_combination_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(90);
        let blend = BlendLayer::new(&mut rng);
        let a = rand_feat(5, 5, &mut rng);
        // equal inputs: any gate value returns the input
        let out = blend.forward(&a, &a);
        let diff = (&*out.data() - &*a.data()).mapv(f64::abs).sum();
        assert!(diff < 1e-12);

        // bias driven to saturation picks branch 0 exactly
        blend
            .conv
            .bias
            .set_data(ArrayD::from_elem(IxDyn(&[1]), 60.0));
        let b = rand_feat(5, 5, &mut rng);
        let out0 = blend.forward(&a, &b);
        assert_eq!(out0.to_array(), a.to_array());
    }

    #[test]
    fn blend_elementwise_hand_value() {
        // a = 2, b = 0, W = 0.25 -> 0.5
        let w = 0.25f64;
        assert!((w * 2.0 + (1.0 - w) * 0.0 - 0.5).abs() < 1e-12);
        // and through the layer: logit for W = 0.25 is ln(1/3)
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let blend = BlendLayer::new(&mut rng);
        blend
            .conv
            .bias
            .set_data(ArrayD::from_elem(IxDyn(&[1]), (1.0f64 / 3.0).ln()));
        let a = Tensor::constant(ArrayD::from_elem(IxDyn(&[FEATURE_CHANNELS, 4, 4]), 2.0));
        let b = Tensor::constant(ArrayD::from_elem(IxDyn(&[FEATURE_CHANNELS, 4, 4]), 0.0));
        let out = blend.forward(&a, &b);
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn interpolate_shape_and_swap_invariance_with_tied_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(92);
        let mut stage = TemporalInterp::new(&mut rng);
        // make refinement non-trivial, then tie
        for level in &mut stage.refine {
            let mut w = level.head2.weight.to_array();
            w.mapv_inplace(|_| rng.gen_range(-0.03..0.03));
            level.head2.weight.set_data(w);
        }
        {
            let mut bw = stage.blend.conv.weight.to_array();
            bw.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
            stage.blend.conv.weight.set_data(bw);
        }
        stage.tie_symmetric_test_weights();

        let f0 = rand_feat(12, 12, &mut rng);
        let f1 = rand_feat(12, 12, &mut rng);
        let v01 = rand_flow(12, 12, 1.5, &mut rng);
        let v10 = rand_flow(12, 12, 1.5, &mut rng);
        let out = stage
            .interpolate_feature(&f0, &f1, &v01, &v10, 0.5)
            .unwrap();
        assert_eq!(out.shape(), vec![FEATURE_CHANNELS, 12, 12]);
        let swapped = stage
            .interpolate_feature(&f1, &f0, &v10, &v01, 0.5)
            .unwrap();
        let diff = (&*out.data() - &*swapped.data())
            .mapv(f64::abs)
            .fold(0.0f64, |m, &v| m.max(v));
        assert!(
            diff < 1e-5,
            "swap invariance with tied weights violated: {diff}"
        );
    }

    #[test]
    fn interpolate_counts_invocations() {
        let mut rng = ChaCha8Rng::seed_from_u64(93);
        let stage = TemporalInterp::new(&mut rng);
        let f0 = rand_feat(8, 8, &mut rng);
        let f1 = rand_feat(8, 8, &mut rng);
        let zero = FlowField::zeros(8, 8, 0.0, 1.0);
        let before = counters::read(&counters::TEMPORAL_INTERPOLATIONS);
        let _ = stage
            .interpolate_feature(&f0, &f1, &zero, &zero, 0.5)
            .unwrap();
        assert_eq!(
            counters::read(&counters::TEMPORAL_INTERPOLATIONS),
            before + 1
        );
    }

    #[test]
    fn interpolate_fits_identity_after_training() {
        // static inputs with zero flow: a few optimization steps should pull
        // the interpolated feature onto the shared input
        let mut rng = ChaCha8Rng::seed_from_u64(95);
        let stage = TemporalInterp::new(&mut rng);
        let mut params = Vec::new();
        stage.collect_params("t", &mut params);
        let mut opt =
            crate::nn::Adam::new(params.into_iter().map(|(_, p)| p).collect(), 0.9, 0.999);
        let f = rand_feat(8, 8, &mut rng);
        let zero = FlowField::zeros(8, 8, 0.0, 1.0);
        let target = f.to_array();
        let loss_of = |stage: &TemporalInterp| {
            let out = stage.interpolate_feature(&f, &f, &zero, &zero, 0.5).unwrap();
            let d = crate::tensor::sub_const(&out, &target);
            crate::tensor::mean_all(&crate::tensor::mul(&d, &d))
        };
        let initial = loss_of(&stage).item();
        for _ in 0..60 {
            let loss = loss_of(&stage);
            loss.backward();
            opt.step(2e-3);
        }
        let final_loss = loss_of(&stage).item();
        assert!(
            final_loss < 0.15 * initial,
            "identity fit failed: {initial:.5} -> {final_loss:.5}"
        );
    }

    #[test]
    fn ablation_paths_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(94);
        let mut stage = TemporalInterp::new(&mut rng);
        let f0 = rand_feat(8, 8, &mut rng);
        let f1 = rand_feat(8, 8, &mut rng);
        let flow = rand_flow(8, 8, 1.0, &mut rng);
        stage.use_fwg = false;
        let a = stage
            .interpolate_feature(&f0, &f1, &flow, &flow, 0.5)
            .unwrap();
        assert_eq!(a.shape(), vec![FEATURE_CHANNELS, 8, 8]);
        stage.use_fwg = true;
        stage.use_da = false;
        let b = stage
            .interpolate_feature(&f0, &f1, &flow, &flow, 0.5)
            .unwrap();
        assert_eq!(b.shape(), vec![FEATURE_CHANNELS, 8, 8]);
    }
}
