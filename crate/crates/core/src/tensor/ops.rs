//! Elementwise, reduction and structural ops on [`Tensor`].

use super::Tensor;
use ndarray::{ArrayD, Axis, IxDyn, Slice};

fn assert_same_shape(a: &Tensor, b: &Tensor, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: operand shapes differ");
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "add");
    let data = &*a.data() + &*b.data();
    Tensor::from_op(
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(g);
        }),
    )
}

pub fn sub(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "sub");
    let data = &*a.data() - &*b.data();
    Tensor::from_op(
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents| {
            parents[0].accumulate_grad(g);
            parents[1].accumulate_grad(&-g);
        }),
    )
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_same_shape(a, b, "mul");
    let data = &*a.data() * &*b.data();
    Tensor::from_op(
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, _out, parents| {
            parents[0].accumulate_grad(&(g * &*parents[1].data()));
            parents[1].accumulate_grad(&(g * &*parents[0].data()));
        }),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    mul_scalar(a, -1.0)
}

pub fn add_scalar(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().mapv(|v| v + s);
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, _out, parents| parents[0].accumulate_grad(g)),
    )
}

pub fn mul_scalar(a: &Tensor, s: f64) -> Tensor {
    let data = a.data().mapv(|v| v * s);
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(move |g, _out, parents| parents[0].accumulate_grad(&(g * s))),
    )
}

/// Elementwise subtraction of a constant array (loss targets).
pub fn sub_const(a: &Tensor, c: &ArrayD<f64>) -> Tensor {
    assert_eq!(a.shape(), c.shape(), "sub_const: shapes differ");
    let data = &*a.data() - c;
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, _out, parents| parents[0].accumulate_grad(g)),
    )
}

pub fn abs(a: &Tensor) -> Tensor {
    let data = a.data().mapv(f64::abs);
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, _out, parents| {
            let sign = parents[0].data().mapv(|v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
            parents[0].accumulate_grad(&(g * &sign));
        }),
    )
}

pub fn sqrt(a: &Tensor) -> Tensor {
    let data = a.data().mapv(f64::sqrt);
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, out, parents| {
            let d = out.mapv(|y| 0.5 / y);
            parents[0].accumulate_grad(&(g * &d));
        }),
    )
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let data = a.data().mapv(|v| 1.0 / (1.0 + (-v).exp()));
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, out, parents| {
            let d = out.mapv(|y| y * (1.0 - y));
            parents[0].accumulate_grad(&(g * &d));
        }),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    let data = a.data().mapv(f64::tanh);
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, out, parents| {
            let d = out.mapv(|y| 1.0 - y * y);
            parents[0].accumulate_grad(&(g * &d));
        }),
    )
}

pub fn leaky_relu(a: &Tensor, slope: f64) -> Tensor {
    let data = a.data().mapv(|v| if v > 0.0 { v } else { slope * v });
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(move |g, _out, parents| {
            let d = parents[0]
                .data()
                .mapv(|v| if v > 0.0 { 1.0 } else { slope });
            parents[0].accumulate_grad(&(g * &d));
        }),
    )
}

/// Clamp to [0,1]; gradient passes through strictly interior values only.
pub fn clamp01(a: &Tensor) -> Tensor {
    let data = a.data().mapv(|v| v.clamp(0.0, 1.0));
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(|g, _out, parents| {
            let d = parents[0]
                .data()
                .mapv(|v| if v > 0.0 && v < 1.0 { 1.0 } else { 0.0 });
            parents[0].accumulate_grad(&(g * &d));
        }),
    )
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s = a.data().sum();
    Tensor::from_op(
        ArrayD::from_elem(IxDyn(&[1]), s),
        vec![a.clone()],
        Box::new(|g, _out, parents| {
            let gv = g[[0]];
            let shape = parents[0].shape();
            parents[0].accumulate_grad(&ArrayD::from_elem(IxDyn(&shape), gv));
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    mul_scalar(&sum_all(a), 1.0 / n)
}

/// Concatenates along axis 0 (the channel axis for `[C,H,W]` maps).
pub fn concat_ch(parts: &[&Tensor]) -> Tensor {
    assert!(!parts.is_empty());
    let datas: Vec<_> = parts.iter().map(|p| p.to_array()).collect();
    let views: Vec<_> = datas.iter().map(|d| d.view()).collect();
    let data = ndarray::concatenate(Axis(0), &views).expect("concat_ch: incompatible shapes");
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[0]).collect();
    Tensor::from_op(
        data,
        parts.iter().map(|p| (*p).clone()).collect(),
        Box::new(move |g, _out, parents| {
            let mut start = 0;
            for (p, &sz) in parents.iter().zip(sizes.iter()) {
                let piece = g
                    .slice_axis(Axis(0), Slice::from(start..start + sz))
                    .to_owned();
                p.accumulate_grad(&piece);
                start += sz;
            }
        }),
    )
}

/// Channel range `[start, end)` of a `[C, ...]` tensor.
pub fn slice_ch(a: &Tensor, start: usize, end: usize) -> Tensor {
    let data = a
        .data()
        .slice_axis(Axis(0), Slice::from(start..end))
        .to_owned();
    let full = a.shape();
    Tensor::from_op(
        data,
        vec![a.clone()],
        Box::new(move |g, _out, parents| {
            let mut buf = ArrayD::zeros(IxDyn(&full));
            buf.slice_axis_mut(Axis(0), Slice::from(start..end))
                .assign(g);
            parents[0].accumulate_grad(&buf);
        }),
    )
}

/// Broadcast-multiplies a `[1,H,W]` gate onto a `[C,H,W]` map.
pub fn mul_bcast(gate: &Tensor, x: &Tensor) -> Tensor {
    let gs = gate.shape();
    let xs = x.shape();
    assert_eq!(gs[0], 1, "mul_bcast: gate must have one channel");
    assert_eq!(&gs[1..], &xs[1..], "mul_bcast: spatial shapes differ");
    let data = &*x.data() * &*gate.data();
    Tensor::from_op(
        data,
        vec![gate.clone(), x.clone()],
        Box::new(|g, _out, parents| {
            let gate_d = parents[0].data();
            let x_d = parents[1].data();
            parents[1].accumulate_grad(&(g * &*gate_d));
            let prod = g * &*x_d;
            let dgate = prod.sum_axis(Axis(0)).insert_axis(Axis(0));
            parents[0].accumulate_grad(&dgate);
        }),
    )
}

/// Per-channel scaling of a `[C,H,W]` map by a `[C]` vector.
pub fn mul_channels(x: &Tensor, m: &Tensor) -> Tensor {
    let xs = x.shape();
    let ms = m.shape();
    assert_eq!(ms.len(), 1);
    assert_eq!(ms[0], xs[0], "mul_channels: channel count mismatch");
    let mut data = x.to_array();
    {
        let md = m.data();
        for (c, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
            plane.mapv_inplace(|v| v * md[[c]]);
        }
    }
    Tensor::from_op(
        data,
        vec![x.clone(), m.clone()],
        Box::new(|g, _out, parents| {
            let xd = parents[0].data();
            let md = parents[1].data();
            let mut dx = g.clone();
            for (c, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                plane.mapv_inplace(|v| v * md[[c]]);
            }
            parents[0].accumulate_grad(&dx);
            let channels = xd.shape()[0];
            let mut dm = ArrayD::zeros(IxDyn(&[channels]));
            for c in 0..channels {
                let s = (&g.index_axis(Axis(0), c) * &xd.index_axis(Axis(0), c)).sum();
                dm[[c]] = s;
            }
            parents[1].accumulate_grad(&dm);
        }),
    )
}

/// Adds a 2-channel map onto a `[C,H,W]` tensor with channel tiling:
/// `out[c] = x[c] + d[c % 2]`.
pub fn add_channel_tiled(x: &Tensor, d: &Tensor) -> Tensor {
    let xs = x.shape();
    let ds = d.shape();
    assert_eq!(ds[0], 2, "add_channel_tiled: offset map must have 2 channels");
    assert_eq!(&ds[1..], &xs[1..], "add_channel_tiled: spatial shapes differ");
    let mut data = x.to_array();
    {
        let dd = d.data();
        for (c, mut plane) in data.axis_iter_mut(Axis(0)).enumerate() {
            plane += &dd.index_axis(Axis(0), c % 2);
        }
    }
    let channels = xs[0];
    Tensor::from_op(
        data,
        vec![x.clone(), d.clone()],
        Box::new(move |g, _out, parents| {
            parents[0].accumulate_grad(g);
            let spatial = &parents[1].shape()[1..];
            let mut dd = ArrayD::zeros(IxDyn(&[2, spatial[0], spatial[1]]));
            for c in 0..channels {
                let mut slot = dd.index_axis_mut(Axis(0), c % 2);
                slot += &g.index_axis(Axis(0), c);
            }
            parents[1].accumulate_grad(&dd);
        }),
    )
}

/// Multiplies a tensor by a learnable scalar (shape `[1]`).
pub fn mul_scalar_tensor(x: &Tensor, s: &Tensor) -> Tensor {
    assert_eq!(s.len(), 1);
    let sv = s.item();
    let data = x.data().mapv(|v| v * sv);
    Tensor::from_op(
        data,
        vec![x.clone(), s.clone()],
        Box::new(|g, _out, parents| {
            let sv = parents[1].item();
            parents[0].accumulate_grad(&(g * sv));
            let ds = (g * &*parents[0].data()).sum();
            parents[1].accumulate_grad(&ArrayD::from_elem(IxDyn(&[1]), ds));
        }),
    )
}

/// Dense layer on a flat `[n]` vector: `W x + b`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let xs = x.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 1);
    assert_eq!(ws.len(), 2);
    assert_eq!(ws[1], xs[0], "linear: weight/input mismatch");
    assert_eq!(bias.shape(), vec![ws[0]]);
    let (m, n) = (ws[0], ws[1]);
    let mut out = ArrayD::zeros(IxDyn(&[m]));
    {
        let xd = x.data();
        let wd = weight.data();
        let bd = bias.data();
        for i in 0..m {
            let mut acc = bd[[i]];
            for j in 0..n {
                acc += wd[[i, j]] * xd[[j]];
            }
            out[[i]] = acc;
        }
    }
    Tensor::from_op(
        out,
        vec![x.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, _out, parents| {
            let xd = parents[0].data();
            let wd = parents[1].data();
            let mut dx = ArrayD::zeros(IxDyn(&[n]));
            let mut dw = ArrayD::zeros(IxDyn(&[m, n]));
            for i in 0..m {
                let gi = g[[i]];
                for j in 0..n {
                    dx[[j]] += wd[[i, j]] * gi;
                    dw[[i, j]] = gi * xd[[j]];
                }
            }
            drop(xd);
            drop(wd);
            parents[0].accumulate_grad(&dx);
            parents[1].accumulate_grad(&dw);
            parents[2].accumulate_grad(g);
        }),
    )
}
