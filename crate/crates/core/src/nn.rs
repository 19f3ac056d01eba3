//! Small layer toolkit: convolutions, dense layers, residual blocks,
//! initialization and the optimizer.

use crate::tensor::{add, conv2d, leaky_relu, linear, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Negative slope used by every activation in the network.
pub const LEAK: f64 = 0.1;

pub fn lrelu(x: &Tensor) -> Tensor {
    leaky_relu(x, LEAK)
}

fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), v).unwrap()
}

/// Convolution layer with bias.
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let bound = 1.0 / fan_in.sqrt();
        Conv2dLayer {
            weight: Tensor::param(uniform(&[c_out, c_in, k, k], bound, rng)),
            bias: Tensor::param(uniform(&[c_out], bound, rng)),
            stride,
            pad: k / 2,
        }
    }

    /// Weight and bias start at zero; the layer contributes nothing until
    /// trained. Used for offset heads and residual output tails.
    pub fn new_zeroed(c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Conv2dLayer {
            weight: Tensor::param(ArrayD::zeros(IxDyn(&[c_out, c_in, k, k]))),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[c_out]))),
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.pad)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Dense layer on flat vectors.
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        LinearLayer {
            weight: Tensor::param(uniform(&[n_out, n_in], bound, rng)),
            bias: Tensor::param(uniform(&[n_out], bound, rng)),
        }
    }

    pub fn new_zeroed(n_in: usize, n_out: usize) -> Self {
        LinearLayer {
            weight: Tensor::param(ArrayD::zeros(IxDyn(&[n_out, n_in]))),
            bias: Tensor::param(ArrayD::zeros(IxDyn(&[n_out]))),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        linear(x, &self.weight, &self.bias)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// `x + conv2(lrelu(conv1(x)))`, shape preserving.
pub struct ResidualBlock {
    pub conv1: Conv2dLayer,
    pub conv2: Conv2dLayer,
}

impl ResidualBlock {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualBlock {
            conv1: Conv2dLayer::new(channels, channels, 3, 1, rng),
            conv2: Conv2dLayer::new(channels, channels, 3, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let y = self.conv2.forward(&lrelu(&self.conv1.forward(x)));
        add(x, &y)
    }

    pub fn collect_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.conv1.collect_params(&format!("{prefix}.conv1"), out);
        self.conv2.collect_params(&format!("{prefix}.conv2"), out);
    }
}

/// Adam with decoupled learning-rate schedule.
pub struct Adam {
    params: Vec<Tensor>,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: usize,
}

impl Adam {
    pub fn new(params: Vec<Tensor>, beta1: f64, beta2: f64) -> Self {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(p.data().raw_dim()))
            .collect();
        Adam {
            params,
            m,
            v,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn step(&mut self, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (beta1, beta2, eps) = (self.beta1, self.beta2, self.eps);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut data = p.to_array();
            ndarray::Zip::from(&mut data)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grad)
                .for_each(|d, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *d -= lr * mh / (vh.sqrt() + eps);
                });
            p.set_data(data);
            p.zero_grad();
        }
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Cosine annealing from `lr_init` down to `lr_final` over `total` steps.
pub fn cosine_lr(lr_init: f64, lr_final: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr_init;
    }
    let progress = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mean_all, mul, sub_const};
    use rand::SeedableRng;

    #[test]
    fn residual_block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ResidualBlock::new(4, &mut rng);
        let x = Tensor::constant(uniform(&[4, 6, 5], 1.0, &mut rng));
        assert_eq!(block.forward(&x).shape(), vec![4, 6, 5]);
    }

    #[test]
    fn zeroed_conv_contributes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv2dLayer::new_zeroed(3, 2, 3, 1);
        let x = Tensor::constant(uniform(&[3, 5, 5], 1.0, &mut rng));
        assert!(conv.forward(&x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_reduces_quadratic_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::param(uniform(&[4, 4], 1.0, &mut rng));
        let target = uniform(&[4, 4], 1.0, &mut rng);
        let mut opt = Adam::new(vec![p.clone()], 0.9, 0.999);
        let loss_at = |p: &Tensor| {
            let d = sub_const(p, &target);
            mean_all(&mul(&d, &d))
        };
        let initial = loss_at(&p).item();
        for _ in 0..200 {
            let loss = loss_at(&p);
            loss.backward();
            opt.step(0.05);
        }
        let fin = loss_at(&p).item();
        assert!(
            fin < 0.01 * initial,
            "Adam failed to optimize: {initial} -> {fin}"
        );
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(2e-4, 1e-7, 0, 100) - 2e-4).abs() < 1e-12);
        assert!((cosine_lr(2e-4, 1e-7, 99, 100) - 1e-7).abs() < 1e-12);
        let mid = cosine_lr(2e-4, 1e-7, 50, 101);
        assert!(mid < 2e-4 && mid > 1e-7);
    }
}
