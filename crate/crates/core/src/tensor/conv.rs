//! 2-D convolution via im2col and GEMM.
//!
//! Single image layout `[C,H,W]`, zero padding, square kernels. The GEMM is
//! split into row or column blocks across rayon workers; each output element
//! is produced by exactly one worker with a fixed-order inner loop, so results
//! are bit-identical regardless of thread count.

use super::Tensor;
use crate::gauge::ScratchGuard;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, Axis, Ix3, IxDyn};
use rayon::prelude::*;

const PAR_FLOP_THRESHOLD: usize = 1 << 21;

/// `a . b` into a fresh standard-layout array, split into disjoint row or
/// column blocks across the rayon pool. Each output element is produced by
/// exactly one worker, so the result is bit-identical at any thread count.
pub(crate) fn par_matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "par_matmul: inner dimensions differ");
    let threads = rayon::current_num_threads();
    if threads <= 1 || m.saturating_mul(k).saturating_mul(n) < PAR_FLOP_THRESHOLD {
        return a.dot(&b);
    }
    let mut out = Array2::<f64>::zeros((m, n));
    if m >= n {
        let chunk = m.div_ceil(threads * 2).max(1);
        let a_chunks: Vec<_> = a.axis_chunks_iter(Axis(0), chunk).collect();
        let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(0), chunk).collect();
        a_chunks
            .into_par_iter()
            .zip(out_chunks)
            .for_each(|(av, mut ov)| general_mat_mul(1.0, &av, &b, 0.0, &mut ov));
    } else {
        let chunk = n.div_ceil(threads * 2).max(1);
        let b_chunks: Vec<_> = b.axis_chunks_iter(Axis(1), chunk).collect();
        let out_chunks: Vec<_> = out.axis_chunks_iter_mut(Axis(1), chunk).collect();
        b_chunks
            .into_par_iter()
            .zip(out_chunks)
            .for_each(|(bv, mut ov)| general_mat_mul(1.0, &a, &bv, 0.0, &mut ov));
    }
    out
}

fn conv_out_len(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col(
    input: &ArrayD<f64>,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Array2<f64> {
    let c_in = input.shape()[0];
    let h = input.shape()[1] as isize;
    let w = input.shape()[2] as isize;
    let mut col = Array2::<f64>::zeros((c_in * k * k, h_out * w_out));
    let input3 = input.view().into_dimensionality::<Ix3>().unwrap();
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        col[[row, oy * w_out + ox]] = input3[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dcol: &Array2<f64>,
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> ArrayD<f64> {
    let mut dx = ArrayD::<f64>::zeros(IxDyn(&[c_in, h, w]));
    for c in 0..c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..w_out {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[c, iy as usize, ix as usize]] += dcol[[row, oy * w_out + ox]];
                    }
                }
            }
        }
    }
    dx
}

/// Convolves `input [C_in,H,W]` with `weight [C_out,C_in,k,k]` plus optional
/// bias, zero padding `pad`, stride `stride`.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Tensor {
    let ishape = input.shape();
    let wshape = weight.shape();
    assert_eq!(ishape.len(), 3, "conv2d: input must be [C,H,W]");
    assert_eq!(wshape.len(), 4, "conv2d: weight must be [Co,Ci,k,k]");
    assert_eq!(wshape[1], ishape[0], "conv2d: channel mismatch");
    assert_eq!(wshape[2], wshape[3], "conv2d: kernel must be square");
    let (c_in, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (c_out, k) = (wshape[0], wshape[2]);
    assert!(stride >= 1);
    let h_out = conv_out_len(h, k, stride, pad);
    let w_out = conv_out_len(w, k, stride, pad);

    let pointwise = k == 1 && stride == 1 && pad == 0;

    let out2 = {
        let idata = input.data();
        let wdata = weight.data();
        let w2 = wdata
            .view()
            .into_shape((c_out, c_in * k * k))
            .expect("weight reshape");
        if pointwise {
            let x2 = idata.view().into_shape((c_in, h * w)).unwrap();
            par_matmul(w2, x2)
        } else {
            let _scratch =
                ScratchGuard::new(c_in * k * k * h_out * w_out * std::mem::size_of::<f64>());
            let col = im2col(&idata, k, stride, pad, h_out, w_out);
            par_matmul(w2, col.view())
        }
    };

    let mut out = out2
        .into_shape((c_out, h_out, w_out))
        .unwrap()
        .into_dyn();
    if let Some(b) = bias {
        let bdata = b.data();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v + bdata[[c]]);
        }
    }

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    Tensor::from_op(
        out,
        parents,
        Box::new(move |g, _out, parents| {
            let g2 = g.view().into_shape((c_out, h_out * w_out)).unwrap();
            let idata = parents[0].data();
            let wdata = parents[1].data();
            let w2 = wdata.view().into_shape((c_out, c_in * k * k)).unwrap();

            if pointwise {
                let x2 = idata.view().into_shape((c_in, h * w)).unwrap();
                let dw = par_matmul(g2, x2.t());
                let dx = par_matmul(w2.t(), g2);
                drop(idata);
                drop(wdata);
                parents[0].accumulate_grad(&dx.into_shape((c_in, h, w)).unwrap().into_dyn());
                parents[1]
                    .accumulate_grad(&dw.into_shape((c_out, c_in, k, k)).unwrap().into_dyn());
            } else {
                let _scratch = ScratchGuard::new(
                    2 * c_in * k * k * h_out * w_out * std::mem::size_of::<f64>(),
                );
                let col = im2col(&idata, k, stride, pad, h_out, w_out);
                let dw = par_matmul(g2, col.t());
                let dcol = par_matmul(w2.t(), g2);
                drop(idata);
                drop(wdata);
                let dx = col2im(&dcol, c_in, h, w, k, stride, pad, h_out, w_out);
                parents[0].accumulate_grad(&dx);
                parents[1]
                    .accumulate_grad(&dw.into_shape((c_out, c_in, k, k)).unwrap().into_dyn());
            }

            if parents.len() == 3 {
                let db = g2.sum_axis(Axis(1)).into_dyn();
                parents[2].accumulate_grad(&db);
            }
        }),
    )
}
