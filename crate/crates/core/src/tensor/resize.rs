//! Depth-to-space rearrangement and bilinear resampling to an exact size.

use super::Tensor;
use ndarray::{ArrayD, IxDyn};

/// Rearranges `[C·r², H, W]` into `[C, r·H, r·W]`:
/// `output(c, r·y+dy, r·x+dx) = input(c·r² + dy·r + dx, y, x)`.
///
/// # Panics
/// Panics when the channel count is not divisible by `r²`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Tensor {
    assert!(r >= 1, "pixel_shuffle: r must be >= 1");
    let shape = input.shape();
    assert_eq!(shape.len(), 3);
    let (c_r2, h, w) = (shape[0], shape[1], shape[2]);
    assert_eq!(
        c_r2 % (r * r),
        0,
        "pixel_shuffle: {c_r2} channels not divisible by r^2 = {}",
        r * r
    );
    let c = c_r2 / (r * r);
    let data = {
        let idata = input.data();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, r * h, r * w]));
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            out[[co, r * y + dy, r * x + dx]] = idata[[ci, y, x]];
                        }
                    }
                }
            }
        }
        out
    };
    Tensor::from_op(
        data,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let mut dx_arr = ArrayD::<f64>::zeros(IxDyn(&[c_r2, h, w]));
            for co in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let ci = co * r * r + dy * r + dx;
                        for y in 0..h {
                            for x in 0..w {
                                dx_arr[[ci, y, x]] = g[[co, r * y + dy, r * x + dx]];
                            }
                        }
                    }
                }
            }
            parents[0].accumulate_grad(&dx_arr);
        }),
    )
}

/// Exact inverse of [`pixel_shuffle`] (pure array form, used by tests).
pub fn space_to_depth(input: &ArrayD<f64>, r: usize) -> ArrayD<f64> {
    let (c, rh, rw) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    assert_eq!(rh % r, 0);
    assert_eq!(rw % r, 0);
    let (h, w) = (rh / r, rw / r);
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c * r * r, h, w]));
    for co in 0..c {
        for dy in 0..r {
            for dx in 0..r {
                let ci = co * r * r + dy * r + dx;
                for y in 0..h {
                    for x in 0..w {
                        out[[ci, y, x]] = input[[co, r * y + dy, r * x + dx]];
                    }
                }
            }
        }
    }
    out
}

struct Taps {
    i0: Vec<usize>,
    i1: Vec<usize>,
    w1: Vec<f64>,
}

/// Half-pixel sampling positions with replicate borders.
fn resize_taps(n_in: usize, n_out: usize) -> Taps {
    let scale = n_in as f64 / n_out as f64;
    let mut i0 = Vec::with_capacity(n_out);
    let mut i1 = Vec::with_capacity(n_out);
    let mut w1 = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let pos = (o as f64 + 0.5) * scale - 0.5;
        let floor = pos.floor();
        let frac = pos - floor;
        let a = (floor as isize).clamp(0, n_in as isize - 1) as usize;
        let b = (floor as isize + 1).clamp(0, n_in as isize - 1) as usize;
        i0.push(a);
        i1.push(b);
        w1.push(frac);
    }
    Taps { i0, i1, w1 }
}

/// Bilinear resample of `[C,H,W]` to exactly `(out_h, out_w)` using half-pixel
/// coordinate mapping. Identity when the size is unchanged.
pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let shape = input.shape();
    assert_eq!(shape.len(), 3);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    assert!(out_h >= 1 && out_w >= 1);
    if out_h == h && out_w == w {
        // still record an identity node so gradients flow
        let data = input.to_array();
        return Tensor::from_op(
            data,
            vec![input.clone()],
            Box::new(|g, _out, parents| parents[0].accumulate_grad(g)),
        );
    }
    let ty = resize_taps(h, out_h);
    let tx = resize_taps(w, out_w);
    let data = {
        let idata = input.data();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, out_h, out_w]));
        for ch in 0..c {
            for oy in 0..out_h {
                let (y0, y1, fy) = (ty.i0[oy], ty.i1[oy], ty.w1[oy]);
                for ox in 0..out_w {
                    let (x0, x1, fx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                    let v00 = idata[[ch, y0, x0]];
                    let v01 = idata[[ch, y0, x1]];
                    let v10 = idata[[ch, y1, x0]];
                    let v11 = idata[[ch, y1, x1]];
                    out[[ch, oy, ox]] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
        out
    };
    Tensor::from_op(
        data,
        vec![input.clone()],
        Box::new(move |g, _out, parents| {
            let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c, h, w]));
            for ch in 0..c {
                for oy in 0..out_h {
                    let (y0, y1, fy) = (ty.i0[oy], ty.i1[oy], ty.w1[oy]);
                    for ox in 0..out_w {
                        let (x0, x1, fx) = (tx.i0[ox], tx.i1[ox], tx.w1[ox]);
                        let gv = g[[ch, oy, ox]];
                        dx[[ch, y0, x0]] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[[ch, y0, x1]] += gv * (1.0 - fy) * fx;
                        dx[[ch, y1, x0]] += gv * fy * (1.0 - fx);
                        dx[[ch, y1, x1]] += gv * fy * fx;
                    }
                }
            }
            parents[0].accumulate_grad(&dx);
        }),
    )
}
