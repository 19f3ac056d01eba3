//! Flow-guided texture-consistency pseudo labels.
//!
//! The two reference frames are warped to the intermediate time patch by
//! patch (one averaged flow vector per patch, rigid within the patch), then
//! for every patch the candidate whose census descriptors sit closest to the
//! prediction's is copied into the label. Flow guidance leaves exactly two
//! candidates per patch. Nothing here carries gradients: the prediction is
//! treated as a constant and the label is assembled from raw pixels.

use crate::counters;
use crate::error::{Error, Result};
use crate::flow::{avg_pool_flow, reverse_flow_to_t, FlowField};
use crate::PATCH_SIZE;
use ndarray::{Array2, Array3};

/// Rec. 601 luma weights, fixed for the whole crate.
pub fn luminance(img: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = img.dim();
    assert_eq!(c, 3, "luminance expects RGB");
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            out[[y, x]] =
                0.299 * img[[0, y, x]] + 0.587 * img[[1, y, x]] + 0.114 * img[[2, y, x]];
        }
    }
    out
}

/// Neighbour order of the 3x3 census window, row-major without the centre.
pub const CENSUS_NEIGHBOURS: [(isize, isize); 8] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

/// Signed 3x3 neighbourhood comparisons, one channel per neighbour.
#[derive(Clone, Debug)]
pub struct CensusMap {
    /// `[8, H, W]`, entries in {-1, +1}; ties compare as +1.
    pub descriptors: Array3<f64>,
}

/// `descriptor(k,y,x) = sign(img(y,x) - img(neighbour_k))` with replicate
/// borders and `sign(0) = +1`.
pub fn census_transform(img: &Array2<f64>) -> CensusMap {
    let (h, w) = img.dim();
    let mut descriptors = Array3::zeros((8, h, w));
    for (k, (dy, dx)) in CENSUS_NEIGHBOURS.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let nx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                descriptors[[k, y, x]] = if img[[y, x]] >= img[[ny, nx]] {
                    1.0
                } else {
                    -1.0
                };
            }
        }
    }
    CensusMap { descriptors }
}

/// Patch-winner bookkeeping: which reference frame each patch was taken from.
#[derive(Clone, Debug)]
pub struct PatchGrid {
    pub patch_size: usize,
    /// `[grid_h, grid_w]`, values 0 or 1.
    pub source_id: Array2<u8>,
}

fn pad_to_multiple(img: &Array3<f64>, p: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let (ph, pw) = (h.div_ceil(p) * p, w.div_ceil(p) * p);
    if ph == h && pw == w {
        return img.clone();
    }
    let mut out = Array3::zeros((c, ph, pw));
    for ch in 0..c {
        for y in 0..ph {
            for x in 0..pw {
                out[[ch, y, x]] = img[[ch, y.min(h - 1), x.min(w - 1)]];
            }
        }
    }
    out
}

/// Warps both reference frames to the intermediate time with one flow vector
/// per patch: every `p x p` destination patch samples its source rigidly.
pub fn warp_patches(
    i0: &Array3<f64>,
    i1: &Array3<f64>,
    vt0_avg: &FlowField,
    vt1_avg: &FlowField,
) -> Result<(Array3<f64>, Array3<f64>)> {
    if i0.dim() != i1.dim() {
        return Err(Error::ShapeMismatch {
            context: "warp_patches frames",
            expected: i0.shape().to_vec(),
            got: i1.shape().to_vec(),
        });
    }
    let (c, h, w) = i0.dim();
    let p = PATCH_SIZE;
    let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
    for (name, flow) in [("vt0", vt0_avg), ("vt1", vt1_avg)] {
        if flow.height() != gh || flow.width() != gw {
            return Err(Error::ShapeMismatch {
                context: if name == "vt0" {
                    "warp_patches vt0 grid"
                } else {
                    "warp_patches vt1 grid"
                },
                expected: vec![gh, gw],
                got: vec![flow.height(), flow.width()],
            });
        }
    }
    let warp_one = |src: &Array3<f64>, flow: &FlowField| -> Array3<f64> {
        let mut out = Array3::zeros((c, h, w));
        for gy in 0..gh {
            for gx in 0..gw {
                let u = flow.data[[0, gy, gx]];
                let v = flow.data[[1, gy, gx]];
                for iy in 0..p {
                    for ix in 0..p {
                        let y = gy * p + iy;
                        let x = gx * p + ix;
                        if y >= h || x >= w {
                            continue;
                        }
                        let tap =
                            crate::flow::BilinearTap::at(x as f64 + u, y as f64 + v, h, w);
                        for ch in 0..c {
                            out[[ch, y, x]] =
                                tap.sample(&src.index_axis(ndarray::Axis(0), ch));
                        }
                    }
                }
            }
        }
        out
    };
    Ok((warp_one(i0, vt0_avg), warp_one(i1, vt1_avg)))
}

/// Per patch, picks the warped candidate whose census descriptors are closest
/// (squared L2) to the prediction's and assembles the label from the winning
/// RGB patches. Ties go to source 0.
pub fn select_pseudo(
    pred: &Array3<f64>,
    i0_warped: &Array3<f64>,
    i1_warped: &Array3<f64>,
    p: usize,
) -> Result<(Array3<f64>, PatchGrid)> {
    if pred.dim() != i0_warped.dim() || pred.dim() != i1_warped.dim() {
        return Err(Error::ShapeMismatch {
            context: "select_pseudo",
            expected: pred.shape().to_vec(),
            got: i0_warped.shape().to_vec(),
        });
    }
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (_, h, w) = pred.dim();
    let pred_p = pad_to_multiple(pred, p);
    let c0_p = pad_to_multiple(i0_warped, p);
    let c1_p = pad_to_multiple(i1_warped, p);
    let (_, ph, pw) = pred_p.dim();
    let (gh, gw) = (ph / p, pw / p);

    let census_pred = census_transform(&luminance(&pred_p));
    let census_0 = census_transform(&luminance(&c0_p));
    let census_1 = census_transform(&luminance(&c1_p));

    let mut source_id = Array2::<u8>::zeros((gh, gw));
    let mut pseudo = Array3::zeros((3, h, w));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut d0 = 0.0;
            let mut d1 = 0.0;
            for k in 0..8 {
                for iy in 0..p {
                    for ix in 0..p {
                        let y = gy * p + iy;
                        let x = gx * p + ix;
                        let dp = census_pred.descriptors[[k, y, x]];
                        let e0 = census_0.descriptors[[k, y, x]] - dp;
                        let e1 = census_1.descriptors[[k, y, x]] - dp;
                        d0 += e0 * e0;
                        d1 += e1 * e1;
                    }
                }
            }
            counters::bump(&counters::PSEUDO_CANDIDATE_EVALS, 2);
            let winner = if d1 < d0 { 1u8 } else { 0u8 };
            source_id[[gy, gx]] = winner;
            let src = if winner == 0 { &c0_p } else { &c1_p };
            for iy in 0..p {
                for ix in 0..p {
                    let y = gy * p + iy;
                    let x = gx * p + ix;
                    if y >= h || x >= w {
                        continue;
                    }
                    for ch in 0..3 {
                        pseudo[[ch, y, x]] = src[[ch, y, x]];
                    }
                }
            }
        }
    }
    Ok((
        pseudo,
        PatchGrid {
            patch_size: p,
            source_id,
        },
    ))
}

/// Full pseudo-label pipeline: the stage-1 flows are reversed to time `t`,
/// pooled to patch resolution, used for rigid patch warping, and the census
/// winner per patch is copied into the label. Flows are passed in, never
/// re-estimated here.
pub fn make_pseudo_label(
    i0: &Array3<f64>,
    i1: &Array3<f64>,
    pred: &Array3<f64>,
    v01: &FlowField,
    v10: &FlowField,
    t: f64,
) -> Result<(Array3<f64>, PatchGrid)> {
    let (vt0, vt1) = reverse_flow_to_t(v01, v10, t)?;
    let vt0_avg = avg_pool_flow(&vt0, PATCH_SIZE)?;
    let vt1_avg = avg_pool_flow(&vt1, PATCH_SIZE)?;
    let (w0, w1) = warp_patches(i0, i1, &vt0_avg, &vt1_avg)?;
    select_pseudo(pred, &w0, &w1, PATCH_SIZE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rgb(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let mut img = Array3::zeros((3, h, w));
        img.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        img
    }

    #[test]
    fn census_constant_image_is_all_ones() {
        let img = Array2::from_elem((6, 6), 0.4);
        let census = census_transform(&img);
        assert!(census.descriptors.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn census_is_illumination_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut img = Array2::zeros((8, 8));
        img.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        let shifted = img.mapv(|v| v + 0.37);
        assert_eq!(
            census_transform(&img).descriptors,
            census_transform(&shifted).descriptors
        );
    }

    #[test]
    fn census_ramp_sign_pattern() {
        // img(y,x) = x: strictly greater than left neighbours, smaller than
        // right neighbours in the interior
        let img = Array2::from_shape_fn((6, 8), |(_, x)| x as f64);
        let census = census_transform(&img);
        // channels with dx = -1: indices 0, 3, 5; dx = +1: indices 2, 4, 7
        for y in 1..5 {
            for x in 1..7 {
                for k in [0usize, 3, 5] {
                    assert_eq!(census.descriptors[[k, y, x]], 1.0);
                }
                for k in [2usize, 4, 7] {
                    assert_eq!(census.descriptors[[k, y, x]], -1.0);
                }
            }
        }
    }

    #[test]
    fn warp_patches_zero_flow_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let i0 = rand_rgb(8, 8, &mut rng);
        let i1 = rand_rgb(8, 8, &mut rng);
        let zero = FlowField::zeros(2, 2, 0.5, 0.0);
        let (w0, w1) = warp_patches(&i0, &i1, &zero, &zero).unwrap();
        assert_eq!(w0, i0);
        assert_eq!(w1, i1);
    }

    #[test]
    fn warp_patches_rigid_shift_copies_neighbour_patch() {
        // constant flow (p, 0): each patch equals its right-neighbour patch
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let i0 = rand_rgb(8, 12, &mut rng);
        let p = PATCH_SIZE;
        let mut flow = Array3::zeros((2, 2, 3));
        flow.index_axis_mut(ndarray::Axis(0), 0).fill(p as f64);
        let field = FlowField::new(flow, 0.5, 0.0).unwrap();
        let zero = FlowField::zeros(2, 3, 0.5, 1.0);
        let (w0, _) = warp_patches(&i0, &i0, &field, &zero).unwrap();
        for y in 0..8 {
            for x in 0..12 - p {
                for ch in 0..3 {
                    assert!(
                        (w0[[ch, y, x]] - i0[[ch, y, x + p]]).abs() < 1e-12,
                        "rigid shift mismatch at ({y},{x})"
                    );
                }
            }
        }
    }

    #[test]
    fn warp_patches_offset_constant_within_patch() {
        // patch rigidity: within any output patch the sampling offset is one
        // vector, so warping a ramp gives a ramp shifted by one constant
        let p = PATCH_SIZE;
        let img = Array3::from_shape_fn((3, 8, 8), |(_, _, x)| x as f64);
        let mut flow = Array3::zeros((2, 2, 2));
        flow[[0, 0, 0]] = 1.25;
        flow[[0, 0, 1]] = -0.5;
        flow[[0, 1, 0]] = 2.0;
        flow[[0, 1, 1]] = 0.75;
        let field = FlowField::new(flow.clone(), 0.5, 0.0).unwrap();
        let zero = FlowField::zeros(2, 2, 0.5, 1.0);
        let (w0, _) = warp_patches(&img, &img, &field, &zero).unwrap();
        for gy in 0..2 {
            for gx in 0..2 {
                let u = flow[[0, gy, gx]];
                for iy in 0..p {
                    for ix in 0..p {
                        let (y, x) = (gy * p + iy, gx * p + ix);
                        let expected = (x as f64 + u).clamp(0.0, 7.0);
                        assert!(
                            (w0[[0, y, x]] - expected).abs() < 1e-12,
                            "patch ({gy},{gx}) pixel ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn warp_patches_rejects_grid_mismatch() {
        let i0 = Array3::zeros((3, 8, 8));
        let bad = FlowField::zeros(3, 3, 0.5, 0.0);
        let good = FlowField::zeros(2, 2, 0.5, 1.0);
        assert!(warp_patches(&i0, &i0, &bad, &good).is_err());
    }

    #[test]
    fn select_exact_match_wins_everywhere() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let pred = rand_rgb(8, 8, &mut rng);
        let other = rand_rgb(8, 8, &mut rng);
        let (pseudo, grid) = select_pseudo(&pred, &pred, &other, PATCH_SIZE).unwrap();
        assert!(grid.source_id.iter().all(|&s| s == 0));
        assert_eq!(pseudo, pred);
    }

    #[test]
    fn select_prefers_smaller_distance() {
        // candidate 1 equals pred exactly, candidate 0 is its negation in
        // census terms (a reversed ramp)
        let pred = Array3::from_shape_fn((3, 4, 4), |(_, _, x)| x as f64 / 4.0);
        let reversed = Array3::from_shape_fn((3, 4, 4), |(_, _, x)| (3 - x) as f64 / 4.0);
        let (pseudo, grid) = select_pseudo(&pred, &reversed, &pred, 4).unwrap();
        assert!(grid.source_id.iter().all(|&s| s == 1));
        assert_eq!(pseudo, pred);
    }

    #[test]
    fn select_tie_goes_to_source_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let pred = rand_rgb(8, 8, &mut rng);
        let cand = rand_rgb(8, 8, &mut rng);
        // both candidates identical: distances tie exactly
        let (pseudo, grid) = select_pseudo(&pred, &cand, &cand, PATCH_SIZE).unwrap();
        assert!(grid.source_id.iter().all(|&s| s == 0));
        assert_eq!(pseudo, cand);
    }

    #[test]
    fn select_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(56);
        for _ in 0..10 {
            let pred = rand_rgb(16, 16, &mut rng);
            let c0 = rand_rgb(16, 16, &mut rng);
            let c1 = rand_rgb(16, 16, &mut rng);
            let (pseudo, grid) = select_pseudo(&pred, &c0, &c1, 4).unwrap();

            // independent per-patch census-L2 loop
            let cp = census_transform(&luminance(&pred));
            let cc0 = census_transform(&luminance(&c0));
            let cc1 = census_transform(&luminance(&c1));
            for gy in 0..4 {
                for gx in 0..4 {
                    let mut d = [0.0f64; 2];
                    for k in 0..8 {
                        for iy in 0..4 {
                            for ix in 0..4 {
                                let (y, x) = (gy * 4 + iy, gx * 4 + ix);
                                d[0] += (cc0.descriptors[[k, y, x]]
                                    - cp.descriptors[[k, y, x]])
                                .powi(2);
                                d[1] += (cc1.descriptors[[k, y, x]]
                                    - cp.descriptors[[k, y, x]])
                                .powi(2);
                            }
                        }
                    }
                    let expected = if d[1] < d[0] { 1u8 } else { 0u8 };
                    assert_eq!(grid.source_id[[gy, gx]], expected);
                    let src = if expected == 0 { &c0 } else { &c1 };
                    for iy in 0..4 {
                        for ix in 0..4 {
                            let (y, x) = (gy * 4 + iy, gx * 4 + ix);
                            for ch in 0..3 {
                                assert_eq!(pseudo[[ch, y, x]], src[[ch, y, x]]);
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pseudo_label_static_scene_returns_pred() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let img = rand_rgb(16, 16, &mut rng);
        let zero = FlowField::zeros(16, 16, 0.0, 1.0);
        let (pseudo, _) = make_pseudo_label(&img, &img, &img, &zero, &zero, 0.5).unwrap();
        assert_eq!(pseudo, img);
    }

    #[test]
    fn pseudo_label_is_whole_patch_assembly() {
        let mut rng = ChaCha8Rng::seed_from_u64(58);
        let i0 = rand_rgb(16, 16, &mut rng);
        let i1 = rand_rgb(16, 16, &mut rng);
        let pred = rand_rgb(16, 16, &mut rng);
        let zero = FlowField::zeros(16, 16, 0.0, 1.0);
        let (pseudo, grid) = make_pseudo_label(&i0, &i1, &pred, &zero, &zero, 0.5).unwrap();
        // zero flow means the warped candidates are the frames themselves:
        // every patch must be bit-identical to one of them
        let p = PATCH_SIZE;
        for gy in 0..4 {
            for gx in 0..4 {
                let src = if grid.source_id[[gy, gx]] == 0 { &i0 } else { &i1 };
                for iy in 0..p {
                    for ix in 0..p {
                        let (y, x) = (gy * p + iy, gx * p + ix);
                        for ch in 0..3 {
                            assert_eq!(pseudo[[ch, y, x]], src[[ch, y, x]]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn candidate_count_is_two_per_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(59);
        let pred = rand_rgb(16, 16, &mut rng);
        let c0 = rand_rgb(16, 16, &mut rng);
        let c1 = rand_rgb(16, 16, &mut rng);
        let before = counters::read(&counters::PSEUDO_CANDIDATE_EVALS);
        let _ = select_pseudo(&pred, &c0, &c1, 4).unwrap();
        let after = counters::read(&counters::PSEUDO_CANDIDATE_EVALS);
        assert_eq!(after - before, 2 * 4 * 4);
    }
}
