//! Motion primitives shared by all stages: flow fields, backward warping,
//! forward splatting with hole tracking, intermediate-flow approximation,
//! flow pooling and deformable sampling.
//!
//! Flow convention, stated once and tested everywhere: `v_{a->b}(x)` is the
//! displacement that maps a pixel at time `a` to its position at time `b`,
//! so `backward_warp(I_b, v_{a->b})` reconstructs time `a`. Channel 0 is the
//! horizontal component (pixels), channel 1 vertical.
//!
//! Border policy: replication for sampling, discard for splatting
//! out-of-bounds mass.

mod deform;
mod estimate;

pub use deform::{deformable_sample, offset_clamp_bound};
pub use estimate::{estimate_flow, FlowEstimator, PyramidFlow};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::HOLE_EPSILON;
use ndarray::{Array3, ArrayD, Ix3, IxDyn};

/// Per-pixel displacement map between two timestamps.
#[derive(Clone, Debug)]
pub struct FlowField {
    /// `[2, H, W]`; channel 0 horizontal, channel 1 vertical, pixel units.
    pub data: Array3<f64>,
    pub src_time: f64,
    pub dst_time: f64,
}

impl FlowField {
    pub fn new(data: Array3<f64>, src_time: f64, dst_time: f64) -> Result<Self> {
        if data.shape()[0] != 2 {
            return Err(Error::ShapeMismatch {
                context: "FlowField",
                expected: vec![2],
                got: vec![data.shape()[0]],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField {
            data,
            src_time,
            dst_time,
        })
    }

    pub fn zeros(h: usize, w: usize, src_time: f64, dst_time: f64) -> Self {
        FlowField {
            data: Array3::zeros((2, h, w)),
            src_time,
            dst_time,
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Scales displacement magnitudes (time re-anchoring, level changes).
    pub fn scaled(&self, factor: f64) -> Self {
        FlowField {
            data: self.data.mapv(|v| v * factor),
            src_time: self.src_time,
            dst_time: self.dst_time,
        }
    }

    /// Bilinear-resizes the field to `(h, w)`, rescaling the horizontal and
    /// vertical components by the respective size ratios.
    pub fn resized(&self, h: usize, w: usize) -> Self {
        let (h0, w0) = (self.height(), self.width());
        if h == h0 && w == w0 {
            return self.clone();
        }
        let t = Tensor::constant(self.data.clone().into_dyn());
        let resized = crate::tensor::bilinear_resize(&t, h, w).to_array();
        let mut data = resized.into_dimensionality::<Ix3>().unwrap();
        let sx = w as f64 / w0 as f64;
        let sy = h as f64 / h0 as f64;
        for mut row in data.outer_iter_mut().take(1) {
            row.mapv_inplace(|v| v * sx);
        }
        for mut row in data.outer_iter_mut().skip(1) {
            row.mapv_inplace(|v| v * sy);
        }
        FlowField {
            data,
            src_time: self.src_time,
            dst_time: self.dst_time,
        }
    }
}

/// Binary validity map from splatting: 1 = received mass, 0 = hole.
#[derive(Clone, Debug)]
pub struct HoleMask {
    /// `[1, H, W]`, values exactly 0.0 or 1.0.
    pub data: Array3<f64>,
}

impl HoleMask {
    fn from_weights(weights: &ndarray::Array2<f64>) -> Self {
        let (h, w) = weights.dim();
        let mut data = Array3::zeros((1, h, w));
        for y in 0..h {
            for x in 0..w {
                data[[0, y, x]] = if weights[[y, x]] > HOLE_EPSILON {
                    1.0
                } else {
                    0.0
                };
            }
        }
        HoleMask { data }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        HoleMask {
            data: Array3::ones((1, h, w)),
        }
    }

    /// Fraction of valid (non-hole) pixels.
    pub fn coverage(&self) -> f64 {
        self.data.sum() / self.data.len() as f64
    }

    /// Constant tensor of the mask (holes carry no gradient).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::constant(self.data.clone().into_dyn())
    }

    /// Constant tensor of the complement mask.
    pub fn complement_tensor(&self) -> Tensor {
        Tensor::constant(self.data.mapv(|v| 1.0 - v).into_dyn())
    }
}

/// Conflict-resolution strategy for forward splatting.
#[derive(Clone, Debug)]
pub enum SplatMode {
    /// Plain accumulation of weighted contributions.
    Summation,
    /// Accumulated contributions divided by accumulated weight.
    Average,
    /// Contributions additionally weighted by `exp(Z)`; `Z` is a `[1,H,W]`
    /// importance map.
    Softmax(Array3<f64>),
}

fn check_flow_matches(feat_shape: &[usize], flow: &FlowField, context: &'static str) -> Result<()> {
    if flow.height() != feat_shape[1] || flow.width() != feat_shape[2] {
        return Err(Error::ShapeMismatch {
            context,
            expected: vec![feat_shape[1], feat_shape[2]],
            got: vec![flow.height(), flow.width()],
        });
    }
    if !flow.data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("flow field"));
    }
    Ok(())
}

/// One bilinear tap: weights and clamped corner indices for position
/// `(x, y)` in an `h x w` grid, plus what the spatial derivative needs.
#[derive(Clone, Copy)]
pub(crate) struct BilinearTap {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearTap {
    pub fn at(x: f64, y: f64, h: usize, w: usize) -> Self {
        let xf = x.floor();
        let yf = y.floor();
        let x0 = (xf as isize).clamp(0, w as isize - 1) as usize;
        let x1 = (xf as isize + 1).clamp(0, w as isize - 1) as usize;
        let y0 = (yf as isize).clamp(0, h as isize - 1) as usize;
        let y1 = (yf as isize + 1).clamp(0, h as isize - 1) as usize;
        BilinearTap {
            x0,
            x1,
            y0,
            y1,
            fx: x - xf,
            fy: y - yf,
        }
    }

    #[inline]
    pub fn sample(&self, plane: &ndarray::ArrayView2<f64>) -> f64 {
        let v00 = plane[[self.y0, self.x0]];
        let v01 = plane[[self.y0, self.x1]];
        let v10 = plane[[self.y1, self.x0]];
        let v11 = plane[[self.y1, self.x1]];
        v00 * (1.0 - self.fy) * (1.0 - self.fx)
            + v01 * (1.0 - self.fy) * self.fx
            + v10 * self.fy * (1.0 - self.fx)
            + v11 * self.fy * self.fx
    }

    /// `(d/dx, d/dy)` of the sampled value.
    #[inline]
    pub fn derivative(&self, plane: &ndarray::ArrayView2<f64>) -> (f64, f64) {
        let v00 = plane[[self.y0, self.x0]];
        let v01 = plane[[self.y0, self.x1]];
        let v10 = plane[[self.y1, self.x0]];
        let v11 = plane[[self.y1, self.x1]];
        let dx = (v01 - v00) * (1.0 - self.fy) + (v11 - v10) * self.fy;
        let dy = (v10 - v00) * (1.0 - self.fx) + (v11 - v01) * self.fx;
        (dx, dy)
    }
}

/// `output(x,y) = feat(x + u, y + v)` with bilinear sampling and border
/// replication. Pure array form.
pub fn backward_warp(feat: &Array3<f64>, flow: &FlowField) -> Result<Array3<f64>> {
    check_flow_matches(feat.shape(), flow, "backward_warp")?;
    let (c, h, w) = feat.dim();
    let mut out = Array3::zeros((c, h, w));
    for y in 0..h {
        for x in 0..w {
            let u = flow.data[[0, y, x]];
            let v = flow.data[[1, y, x]];
            let tap = BilinearTap::at(x as f64 + u, y as f64 + v, h, w);
            for ch in 0..c {
                out[[ch, y, x]] = tap.sample(&feat.index_axis(ndarray::Axis(0), ch));
            }
        }
    }
    Ok(out)
}

/// Differentiable backward warp. Gradients flow into `feat` and, when the
/// flow tensor requires them, into `flow` through the bilinear weights.
pub fn backward_warp_t(feat: &Tensor, flow: &Tensor) -> Result<Tensor> {
    let fs = feat.shape();
    let ws = flow.shape();
    if ws.len() != 3 || ws[0] != 2 || ws[1] != fs[1] || ws[2] != fs[2] {
        return Err(Error::ShapeMismatch {
            context: "backward_warp",
            expected: vec![2, fs[1], fs[2]],
            got: ws,
        });
    }
    if !flow.data().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("flow field"));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let data = {
        let fd = feat.data();
        let fl = flow.data();
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for y in 0..h {
            for x in 0..w {
                let tap = BilinearTap::at(
                    x as f64 + fl[[0, y, x]],
                    y as f64 + fl[[1, y, x]],
                    h,
                    w,
                );
                for ch in 0..c {
                    let plane = fd
                        .index_axis(ndarray::Axis(0), ch)
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    out[[ch, y, x]] = tap.sample(&plane);
                }
            }
        }
        out
    };
    Ok(Tensor::from_op(
        data,
        vec![feat.clone(), flow.clone()],
        Box::new(move |g, _out, parents| {
            let fd = parents[0].data();
            let fl = parents[1].data();
            let mut dfeat = ArrayD::zeros(IxDyn(&[c, h, w]));
            let mut dflow = ArrayD::zeros(IxDyn(&[2, h, w]));
            for y in 0..h {
                for x in 0..w {
                    let tap = BilinearTap::at(
                        x as f64 + fl[[0, y, x]],
                        y as f64 + fl[[1, y, x]],
                        h,
                        w,
                    );
                    let (mut du, mut dv) = (0.0, 0.0);
                    for ch in 0..c {
                        let gv = g[[ch, y, x]];
                        dfeat[[ch, tap.y0, tap.x0]] += gv * (1.0 - tap.fy) * (1.0 - tap.fx);
                        dfeat[[ch, tap.y0, tap.x1]] += gv * (1.0 - tap.fy) * tap.fx;
                        dfeat[[ch, tap.y1, tap.x0]] += gv * tap.fy * (1.0 - tap.fx);
                        dfeat[[ch, tap.y1, tap.x1]] += gv * tap.fy * tap.fx;
                        let plane = fd
                            .index_axis(ndarray::Axis(0), ch)
                            .into_dimensionality::<ndarray::Ix2>()
                            .unwrap();
                        let (gx, gy) = tap.derivative(&plane);
                        du += gv * gx;
                        dv += gv * gy;
                    }
                    dflow[[0, y, x]] = du;
                    dflow[[1, y, x]] = dv;
                }
            }
            drop(fd);
            drop(fl);
            parents[0].accumulate_grad(&dfeat);
            parents[1].accumulate_grad(&dflow);
        }),
    ))
}

struct SplatTap {
    src: usize,
    tgt: usize,
    w: f64,
}

fn splat_taps(flow: &FlowField, h: usize, w: usize) -> Vec<SplatTap> {
    let mut taps = Vec::with_capacity(4 * h * w);
    for y in 0..h {
        for x in 0..w {
            let tx = x as f64 + flow.data[[0, y, x]];
            let ty = y as f64 + flow.data[[1, y, x]];
            let x0 = tx.floor() as isize;
            let y0 = ty.floor() as isize;
            let fx = tx - x0 as f64;
            let fy = ty - y0 as f64;
            let src = y * w + x;
            for (dy, dx, wt) in [
                (0isize, 0isize, (1.0 - fy) * (1.0 - fx)),
                (0, 1, (1.0 - fy) * fx),
                (1, 0, fy * (1.0 - fx)),
                (1, 1, fy * fx),
            ] {
                let yy = y0 + dy;
                let xx = x0 + dx;
                if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize || wt == 0.0 {
                    continue;
                }
                taps.push(SplatTap {
                    src,
                    tgt: yy as usize * w + xx as usize,
                    w: wt,
                });
            }
        }
    }
    taps
}

/// Forward splat, pure array form: every source pixel distributes its value
/// to the four destination neighbours with bilinear weights. Out-of-bounds
/// mass is discarded.
pub fn forward_splat(
    feat: &Array3<f64>,
    flow: &FlowField,
    mode: &SplatMode,
) -> Result<(Array3<f64>, HoleMask)> {
    check_flow_matches(feat.shape(), flow, "forward_splat")?;
    if !feat.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("forward_splat input"));
    }
    let (c, h, w) = feat.dim();
    let taps = splat_taps(flow, h, w);
    let ez = match mode {
        SplatMode::Softmax(z) => {
            if z.shape() != [1, h, w] {
                return Err(Error::ShapeMismatch {
                    context: "forward_splat importance",
                    expected: vec![1, h, w],
                    got: z.shape().to_vec(),
                });
            }
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("splat importance map"));
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Some(z.mapv(|v| (v - zmax).exp()))
        }
        _ => None,
    };

    let mut acc = Array3::<f64>::zeros((c, h, w));
    let mut weights = ndarray::Array2::<f64>::zeros((h, w));
    let flat = |idx: usize| (idx / w, idx % w);
    for tap in &taps {
        let (sy, sx) = flat(tap.src);
        let (tyy, txx) = flat(tap.tgt);
        let wt = match &ez {
            Some(e) => tap.w * e[[0, sy, sx]],
            None => tap.w,
        };
        weights[[tyy, txx]] += wt;
        for ch in 0..c {
            acc[[ch, tyy, txx]] += wt * feat[[ch, sy, sx]];
        }
    }
    let mask = HoleMask::from_weights(&weights);
    let out = match mode {
        SplatMode::Summation => {
            let mut out = acc;
            for y in 0..h {
                for x in 0..w {
                    if mask.data[[0, y, x]] == 0.0 {
                        for ch in 0..c {
                            out[[ch, y, x]] = 0.0;
                        }
                    }
                }
            }
            out
        }
        SplatMode::Average | SplatMode::Softmax(_) => {
            let mut out = Array3::zeros((c, h, w));
            for y in 0..h {
                for x in 0..w {
                    if mask.data[[0, y, x]] == 1.0 {
                        let d = weights[[y, x]];
                        for ch in 0..c {
                            out[[ch, y, x]] = acc[[ch, y, x]] / d;
                        }
                    }
                }
            }
            out
        }
    };
    Ok((out, mask))
}

/// Differentiable forward splat. Gradients flow into `feat` and, in softmax
/// mode, into the importance tensor `z`.
pub fn forward_splat_t(
    feat: &Tensor,
    flow: &FlowField,
    average: bool,
    z: Option<&Tensor>,
) -> Result<(Tensor, HoleMask)> {
    let fs = feat.shape();
    check_flow_matches(&fs, flow, "forward_splat")?;
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let taps = splat_taps(flow, h, w);

    let ez: Option<Vec<f64>> = match z {
        Some(zt) => {
            let zd = zt.data();
            if zd.shape() != [1, h, w] {
                return Err(Error::ShapeMismatch {
                    context: "forward_splat importance",
                    expected: vec![1, h, w],
                    got: zd.shape().to_vec(),
                });
            }
            if !zd.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("splat importance map"));
            }
            let zmax = zd.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            Some(zd.iter().map(|v| (v - zmax).exp()).collect())
        }
        None => None,
    };

    // Effective per-tap weights and per-target denominators.
    let wts: Vec<f64> = taps
        .iter()
        .map(|t| match &ez {
            Some(e) => t.w * e[t.src],
            None => t.w,
        })
        .collect();
    let mut denom = vec![0.0f64; h * w];
    for (t, &wt) in taps.iter().zip(&wts) {
        denom[t.tgt] += wt;
    }
    let hole: Vec<bool> = denom.iter().map(|&d| d <= HOLE_EPSILON).collect();

    let data = {
        let fd = feat.data();
        let fslice = fd.as_slice().unwrap();
        let mut out = vec![0.0f64; c * h * w];
        let plane = h * w;
        for (t, &wt) in taps.iter().zip(&wts) {
            for ch in 0..c {
                out[ch * plane + t.tgt] += wt * fslice[ch * plane + t.src];
            }
        }
        if average {
            for (p, (&d, &is_hole)) in denom.iter().zip(&hole).enumerate() {
                for ch in 0..c {
                    let idx = ch * plane + p;
                    out[idx] = if is_hole { 0.0 } else { out[idx] / d };
                }
            }
        } else {
            for (p, &is_hole) in hole.iter().enumerate() {
                if is_hole {
                    for ch in 0..c {
                        out[ch * plane + p] = 0.0;
                    }
                }
            }
        }
        ArrayD::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap()
    };

    let mask = {
        let mut m = Array3::zeros((1, h, w));
        for (p, &is_hole) in hole.iter().enumerate() {
            m[[0, p / w, p % w]] = if is_hole { 0.0 } else { 1.0 };
        }
        HoleMask { data: m }
    };

    let mut parents = vec![feat.clone()];
    if let Some(zt) = z {
        parents.push(zt.clone());
    }
    let has_z = z.is_some();
    let out_tensor = Tensor::from_op(
        data,
        parents,
        Box::new(move |g, out, parents| {
            let fd = parents[0].data();
            let fslice = fd.as_slice().unwrap();
            let gslice = g.as_slice().unwrap();
            let oslice = out.as_slice().unwrap();
            let plane = h * w;
            let mut dfeat = vec![0.0f64; c * plane];
            let mut dz = vec![0.0f64; plane];
            for (t, &wt) in taps.iter().zip(&wts) {
                if hole[t.tgt] {
                    continue;
                }
                let scale = if average { wt / denom[t.tgt] } else { wt };
                let mut z_acc = 0.0;
                for ch in 0..c {
                    let gi = gslice[ch * plane + t.tgt];
                    dfeat[ch * plane + t.src] += gi * scale;
                    if has_z && average {
                        // d out / d z_src = w (f_src - out_tgt) / denom
                        z_acc += gi
                            * (fslice[ch * plane + t.src] - oslice[ch * plane + t.tgt]);
                    } else if has_z {
                        z_acc += gi * fslice[ch * plane + t.src];
                    }
                }
                if has_z {
                    dz[t.src] += z_acc * scale;
                }
            }
            drop(fd);
            parents[0]
                .accumulate_grad(&ArrayD::from_shape_vec(IxDyn(&[c, h, w]), dfeat).unwrap());
            if has_z {
                parents[1]
                    .accumulate_grad(&ArrayD::from_shape_vec(IxDyn(&[1, h, w]), dz).unwrap());
            }
        }),
    );
    Ok((out_tensor, mask))
}

/// Approximates flows anchored at intermediate time `t` from the two
/// inter-frame flows. `v_t0` is the average-mode splat of `-t * v01`
/// transported along `t * v01`, with holes filled from `t * v10`;
/// symmetrically for `v_t1`.
pub fn reverse_flow_to_t(
    v01: &FlowField,
    v10: &FlowField,
    t: f64,
) -> Result<(FlowField, FlowField)> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::invalid(format!(
            "intermediate time must lie in (0,1), got {t}"
        )));
    }
    if v01.data.dim() != v10.data.dim() {
        return Err(Error::ShapeMismatch {
            context: "reverse_flow_to_t",
            expected: v01.data.shape().to_vec(),
            got: v10.data.shape().to_vec(),
        });
    }
    let reverse_one = |src: &FlowField, opp: &FlowField, scale: f64| -> Result<Array3<f64>> {
        let transport = src.scaled(scale);
        let values = src.data.mapv(|v| -scale * v);
        let (splatted, mask) = forward_splat(&values, &transport, &SplatMode::Average)?;
        let fill = opp.data.mapv(|v| scale * v);
        let (_, h, w) = splatted.dim();
        let mut out = splatted;
        for y in 0..h {
            for x in 0..w {
                if mask.data[[0, y, x]] == 0.0 {
                    out[[0, y, x]] = fill[[0, y, x]];
                    out[[1, y, x]] = fill[[1, y, x]];
                }
            }
        }
        Ok(out)
    };
    let vt0 = reverse_one(v01, v10, t)?;
    let vt1 = reverse_one(v10, v01, 1.0 - t)?;
    Ok((
        FlowField::new(vt0, t, 0.0)?,
        FlowField::new(vt1, t, 1.0)?,
    ))
}

/// Mean flow per `p x p` patch. Inputs whose sides are not divisible by `p`
/// are first padded by edge replication; the output grid covers the padded
/// extent (ceil division).
pub fn avg_pool_flow(flow: &FlowField, p: usize) -> Result<FlowField> {
    if p == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    let (_, h, w) = flow.data.dim();
    let gh = h.div_ceil(p);
    let gw = w.div_ceil(p);
    let mut out = Array3::zeros((2, gh, gw));
    for ch in 0..2 {
        for gy in 0..gh {
            for gx in 0..gw {
                let mut acc = 0.0;
                for iy in 0..p {
                    for ix in 0..p {
                        let y = (gy * p + iy).min(h - 1);
                        let x = (gx * p + ix).min(w - 1);
                        acc += flow.data[[ch, y, x]];
                    }
                }
                out[[ch, gy, gx]] = acc / (p * p) as f64;
            }
        }
    }
    FlowField::new(out, flow.src_time, flow.dst_time)
}
