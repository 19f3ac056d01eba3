//! Shared input builders for the kernel benchmarks.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stvsr_core::flow::FlowField;
use stvsr_core::Tensor;

pub fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xbe9c)
}

pub fn random_feature(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let v: Vec<f64> = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, &[c, h, w])
}

pub fn random_frame(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let mut img = Array3::zeros((3, h, w));
    img.mapv_inplace(|_| rng.gen_range(0.0..1.0));
    img
}

pub fn random_flow(h: usize, w: usize, mag: f64, rng: &mut ChaCha8Rng) -> FlowField {
    let mut data = Array3::zeros((2, h, w));
    data.mapv_inplace(|_| rng.gen_range(-mag..mag));
    FlowField::new(data, 0.0, 1.0).unwrap()
}
