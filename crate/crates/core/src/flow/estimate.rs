//! Classical coarse-to-fine flow estimation.
//!
//! The default estimator is a dense pyramidal gradient method: at each pyramid
//! level the target frame is warped by the current flow, a windowed 2x2
//! normal system is solved per pixel and the flow is updated, five refinement
//! steps per level. A learned estimator can be plugged in behind
//! [`FlowEstimator`].

use super::{backward_warp, FlowField};
use crate::error::{Error, Result};
use ndarray::{Array2, Array3};

/// Interface for motion estimation between two RGB frames in `[0,1]`.
pub trait FlowEstimator {
    /// Computes `v_{a->b}`: the displacement mapping pixels of `frame_a` to
    /// their positions in `frame_b`.
    fn estimate(&self, frame_a: &Array3<f64>, frame_b: &Array3<f64>) -> Result<FlowField>;
}

/// Dense pyramidal gradient estimator.
#[derive(Clone, Debug)]
pub struct PyramidFlow {
    /// Pyramid depth (level 0 = input resolution).
    pub levels: usize,
    /// Refinement steps per level.
    pub iterations: usize,
    /// Half-width of the box window for the normal equations.
    pub window_radius: usize,
    /// Tikhonov damping added to the diagonal.
    pub damping: f64,
}

impl Default for PyramidFlow {
    fn default() -> Self {
        PyramidFlow {
            levels: 3,
            iterations: 5,
            window_radius: 3,
            damping: 1e-3,
        }
    }
}

fn luminance(frame: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = frame.dim();
    let mut out = Array2::zeros((h, w));
    if c == 3 {
        for y in 0..h {
            for x in 0..w {
                out[[y, x]] = 0.299 * frame[[0, y, x]]
                    + 0.587 * frame[[1, y, x]]
                    + 0.114 * frame[[2, y, x]];
            }
        }
    } else {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += frame[[ch, y, x]];
                }
                out[[y, x]] = acc / c as f64;
            }
        }
    }
    out
}

fn downsample2(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array2::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let sy = (2 * y + dy).min(h - 1);
                    let sx = (2 * x + dx).min(w - 1);
                    acc += img[[sy, sx]];
                }
            }
            out[[y, x]] = acc / 4.0;
        }
    }
    out
}

/// Box filter with edge replication, separable.
fn box_filter(img: &Array2<f64>, radius: usize) -> Array2<f64> {
    if radius == 0 {
        return img.clone();
    }
    let (h, w) = img.dim();
    let r = radius as isize;
    let mut tmp = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let sx = (x as isize + d).clamp(0, w as isize - 1) as usize;
                acc += img[[y, sx]];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h, w));
    let norm = ((2 * radius + 1) * (2 * radius + 1)) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let sy = (y as isize + d).clamp(0, h as isize - 1) as usize;
                acc += tmp[[sy, x]];
            }
            out[[y, x]] = acc / norm;
        }
    }
    out
}

fn central_gradients(img: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = img.dim();
    let mut gx = Array2::zeros((h, w));
    let mut gy = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(w - 1);
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(h - 1);
            gx[[y, x]] = (img[[y, xp]] - img[[y, xm]]) / 2.0;
            gy[[y, x]] = (img[[yp, x]] - img[[ym, x]]) / 2.0;
        }
    }
    (gx, gy)
}

impl PyramidFlow {
    fn refine_level(&self, i0: &Array2<f64>, i1: &Array2<f64>, flow: &mut Array3<f64>) {
        let (h, w) = i0.dim();
        for _ in 0..self.iterations {
            let flow_field = FlowField {
                data: flow.clone(),
                src_time: 0.0,
                dst_time: 1.0,
            };
            let i1_stack = i1
                .clone()
                .into_shape((1, h, w))
                .unwrap()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            let warped3 = backward_warp(&i1_stack, &flow_field).expect("shape checked");
            let warped = warped3.index_axis_move(ndarray::Axis(0), 0);

            let (gx, gy) = central_gradients(&warped);
            let it = &warped - i0;

            let sxx = box_filter(&(&gx * &gx), self.window_radius);
            let sxy = box_filter(&(&gx * &gy), self.window_radius);
            let syy = box_filter(&(&gy * &gy), self.window_radius);
            let sxt = box_filter(&(&gx * &it), self.window_radius);
            let syt = box_filter(&(&gy * &it), self.window_radius);

            for y in 0..h {
                for x in 0..w {
                    let a = sxx[[y, x]] + self.damping;
                    let b = sxy[[y, x]];
                    let d = syy[[y, x]] + self.damping;
                    let det = a * d - b * b;
                    let bx = sxt[[y, x]];
                    let by = syt[[y, x]];
                    let du = (-(d * bx) + b * by) / det;
                    let dv = ((b * bx) - a * by) / det;
                    // one-pixel trust region per step keeps the
                    // linearization honest
                    flow[[0, y, x]] += du.clamp(-1.0, 1.0);
                    flow[[1, y, x]] += dv.clamp(-1.0, 1.0);
                }
            }
            // light spatial regularization
            for ch in 0..2 {
                let plane = flow.index_axis(ndarray::Axis(0), ch).to_owned();
                let smoothed = box_filter(&plane, 1);
                flow.index_axis_mut(ndarray::Axis(0), ch).assign(&smoothed);
            }
        }
    }
}

impl FlowEstimator for PyramidFlow {
    fn estimate(&self, frame_a: &Array3<f64>, frame_b: &Array3<f64>) -> Result<FlowField> {
        if frame_a.dim() != frame_b.dim() {
            return Err(Error::ShapeMismatch {
                context: "estimate_flow",
                expected: frame_a.shape().to_vec(),
                got: frame_b.shape().to_vec(),
            });
        }
        if !frame_a.iter().chain(frame_b.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow estimation input"));
        }
        let mut pyr_a = vec![box_filter(&luminance(frame_a), 1)];
        let mut pyr_b = vec![box_filter(&luminance(frame_b), 1)];
        for _ in 1..self.levels {
            let (h, w) = pyr_a.last().unwrap().dim();
            if h.min(w) < 8 {
                break;
            }
            pyr_a.push(downsample2(pyr_a.last().unwrap()));
            pyr_b.push(downsample2(pyr_b.last().unwrap()));
        }

        let coarsest = pyr_a.len() - 1;
        let (ch, cw) = pyr_a[coarsest].dim();
        let mut flow = Array3::<f64>::zeros((2, ch, cw));
        for level in (0..=coarsest).rev() {
            let (h, w) = pyr_a[level].dim();
            if flow.shape()[1] != h || flow.shape()[2] != w {
                let field = FlowField {
                    data: flow,
                    src_time: 0.0,
                    dst_time: 1.0,
                };
                flow = field.resized(h, w).data;
            }
            self.refine_level(&pyr_a[level], &pyr_b[level], &mut flow);
        }
        FlowField::new(flow, 0.0, 1.0)
    }
}

/// Convenience wrapper running the default estimator.
pub fn estimate_flow(frame_a: &Array3<f64>, frame_b: &Array3<f64>) -> Result<FlowField> {
    PyramidFlow::default().estimate(frame_a, frame_b)
}
