//! Modulated deformable sampling.
//!
//! At every output location the input is sampled bilinearly at the `K*K`
//! kernel taps displaced by learned per-pixel offsets, each sample gated by
//! `sigmoid(mask_logit)`, and the gated samples are combined by the kernel
//! weights. Offsets beyond the clamp bound (a quarter of the larger image
//! side) are clamped, not rejected.

use super::BilinearTap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ndarray::{ArrayD, Ix2, Ix3, IxDyn};

/// Clamp bound for offset magnitudes, in pixels.
pub fn offset_clamp_bound(h: usize, w: usize) -> f64 {
    (h.max(w) as f64 / 4.0).ceil()
}

/// Gated sample matrix `[C*KK, P]` plus the sigmoid gates; the combine step
/// is then a single GEMM against the reshaped kernel weights.
fn build_gated(
    taps: &[BilinearTap],
    fd: &ArrayD<f64>,
    md: &ArrayD<f64>,
    c: usize,
    kk: usize,
    w: usize,
    plane: usize,
) -> (ndarray::Array2<f64>, Vec<f64>) {
    let mut gated = ndarray::Array2::<f64>::zeros((c * kk, plane));
    let mut gates = vec![0.0f64; kk * plane];
    for tap_idx in 0..kk {
        for p in 0..plane {
            gates[tap_idx * plane + p] = 1.0 / (1.0 + (-md[[tap_idx, p / w, p % w]]).exp());
        }
    }
    for ch in 0..c {
        let plane_view = fd
            .index_axis(ndarray::Axis(0), ch)
            .into_dimensionality::<Ix2>()
            .unwrap();
        for tap_idx in 0..kk {
            for p in 0..plane {
                let s = taps[tap_idx * plane + p].sample(&plane_view);
                gated[[ch * kk + tap_idx, p]] = s * gates[tap_idx * plane + p];
            }
        }
    }
    (gated, gates)
}

/// Deformable sampling of `feat [C,H,W]` with `offsets [2*K*K,H,W]`
/// (channel `2k` = horizontal, `2k+1` = vertical displacement of tap `k`,
/// taps in row-major kernel order), `mask_logits [K*K,H,W]`,
/// `weight [C_out,C,K,K]` and optional `bias [C_out]`.
pub fn deformable_sample(
    feat: &Tensor,
    offsets: &Tensor,
    mask_logits: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let fs = feat.shape();
    let os = offsets.shape();
    let ms = mask_logits.shape();
    let ws = weight.shape();
    if fs.len() != 3 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::invalid(
            "deformable_sample: feat must be [C,H,W] and weight [Co,C,K,K]",
        ));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let (c_out, k) = (ws[0], ws[2]);
    if k % 2 == 0 {
        return Err(Error::invalid("deformable_sample: kernel must be odd"));
    }
    if ws[1] != c {
        return Err(Error::ShapeMismatch {
            context: "deformable_sample weight",
            expected: vec![c_out, c, k, k],
            got: ws,
        });
    }
    let kk = k * k;
    if os != vec![2 * kk, h, w] {
        return Err(Error::ShapeMismatch {
            context: "deformable_sample offsets",
            expected: vec![2 * kk, h, w],
            got: os,
        });
    }
    if ms != vec![kk, h, w] {
        return Err(Error::ShapeMismatch {
            context: "deformable_sample mask",
            expected: vec![kk, h, w],
            got: ms,
        });
    }

    let bound = offset_clamp_bound(h, w);
    let half = (k / 2) as isize;
    let plane = h * w;

    // Clamped sampling positions and bilinear taps, shared with backward.
    let taps: Vec<BilinearTap> = {
        let od = offsets.data();
        let mut taps = Vec::with_capacity(kk * plane);
        for tap_idx in 0..kk {
            let ky = (tap_idx / k) as isize - half;
            let kx = (tap_idx % k) as isize - half;
            for y in 0..h {
                for x in 0..w {
                    let ox = od[[2 * tap_idx, y, x]].clamp(-bound, bound);
                    let oy = od[[2 * tap_idx + 1, y, x]].clamp(-bound, bound);
                    let px = x as f64 + kx as f64 + ox;
                    let py = y as f64 + ky as f64 + oy;
                    taps.push(BilinearTap::at(px, py, h, w));
                }
            }
        }
        taps
    };

    let data = {
        let fd = feat.data();
        let md = mask_logits.data();
        let wd = weight.data();
        let (gated, _gates) = build_gated(&taps, &fd, &md, c, kk, w, plane);
        let w2 = wd.view().into_shape((c_out, c * kk)).unwrap();
        let mut out = crate::tensor::conv::par_matmul(w2, gated.view())
            .into_shape((c_out, h, w))
            .unwrap()
            .into_dyn();
        if let Some(b) = bias {
            let bd = b.data();
            for (co, mut pl) in out.axis_iter_mut(ndarray::Axis(0)).enumerate() {
                pl.mapv_inplace(|v| v + bd[[co]]);
            }
        }
        out
    };

    let mut parents = vec![
        feat.clone(),
        offsets.clone(),
        mask_logits.clone(),
        weight.clone(),
    ];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        data,
        parents,
        Box::new(move |g, _out, parents| {
            let fd = parents[0].data();
            let md = parents[2].data();
            let wd = parents[3].data();
            let (gated, gates) = build_gated(&taps, &fd, &md, c, kk, w, plane);
            let g2 = g.view().into_shape((c_out, plane)).unwrap();
            let w2 = wd.view().into_shape((c_out, c * kk)).unwrap();

            // dW and the gradient reaching each gated sample
            let dw = crate::tensor::conv::par_matmul(g2, gated.t());
            let dgated = crate::tensor::conv::par_matmul(w2.t(), g2);

            let mut dfeat = vec![0.0f64; c * plane];
            let mut doffsets = vec![0.0f64; 2 * kk * plane];
            let mut dmask = vec![0.0f64; kk * plane];
            let fd3 = fd.view().into_dimensionality::<Ix3>().unwrap();
            for ch in 0..c {
                let plane_view = fd3.index_axis(ndarray::Axis(0), ch);
                for tap_idx in 0..kk {
                    for p in 0..plane {
                        let tap = &taps[tap_idx * plane + p];
                        let gate = gates[tap_idx * plane + p];
                        let gsample = dgated[[ch * kk + tap_idx, p]];
                        let gs = gsample * gate;
                        // feature gradient through the bilinear weights
                        dfeat[ch * plane + tap.y0 * w + tap.x0] +=
                            gs * (1.0 - tap.fy) * (1.0 - tap.fx);
                        dfeat[ch * plane + tap.y0 * w + tap.x1] += gs * (1.0 - tap.fy) * tap.fx;
                        dfeat[ch * plane + tap.y1 * w + tap.x0] += gs * tap.fy * (1.0 - tap.fx);
                        dfeat[ch * plane + tap.y1 * w + tap.x1] += gs * tap.fy * tap.fx;
                        // offset gradient through the sample position
                        let (dx, dy) = tap.derivative(&plane_view);
                        doffsets[2 * tap_idx * plane + p] += gs * dx;
                        doffsets[(2 * tap_idx + 1) * plane + p] += gs * dy;
                        // gate gradient
                        let sample = tap.sample(&plane_view);
                        dmask[tap_idx * plane + p] +=
                            gsample * sample * gate * (1.0 - gate);
                    }
                }
            }
            // zero offset gradient where the clamp is active
            let od = parents[1].data();
            let bound = offset_clamp_bound(h, w);
            for chn in 0..2 * kk {
                for p in 0..plane {
                    let v = od[[chn, p / w, p % w]];
                    if v.abs() > bound {
                        doffsets[chn * plane + p] = 0.0;
                    }
                }
            }
            drop(fd);
            drop(md);
            drop(wd);
            drop(od);
            parents[0]
                .accumulate_grad(&ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dfeat).unwrap());
            parents[1].accumulate_grad(
                &ArrayD::from_shape_vec(IxDyn(&[2 * kk, h, w]), doffsets).unwrap(),
            );
            parents[2]
                .accumulate_grad(&ArrayD::from_shape_vec(IxDyn(&[kk, h, w]), dmask).unwrap());
            parents[3].accumulate_grad(&dw.into_shape((c_out, c, k, k)).unwrap().into_dyn());
            if parents.len() == 5 {
                let db = g2.sum_axis(ndarray::Axis(1)).into_dyn();
                parents[4].accumulate_grad(&db);
            }
        }),
    ))
}
