//! Seeded fixtures shared by the benchmarks.

use derain_core::{KernelField, KpnConfig, KpnParams, PinnedRng, Tensor};
use rand::{Rng, SeedableRng};

/// Image plane and `K*K` kernel stack in `f64`, values in `[0, 1)` and `[-0.1, 0.1)`.
pub fn plane_fixture(size: usize, width: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = PinnedRng::seed_from_u64(seed);
    let image = (0..size * size).map(|_| rng.random::<f64>()).collect();
    let kernels = (0..width * width * size * size)
        .map(|_| rng.random_range(-0.1..0.1))
        .collect();
    (image, kernels)
}

pub fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

pub fn image_fixture(channels: usize, size: usize, seed: u64) -> Tensor {
    Tensor::random_uniform(
        &[1, channels, size, size],
        0.0,
        1.0,
        &mut PinnedRng::seed_from_u64(seed),
    )
}

pub fn kernel_fixture(size: usize, width: usize, seed: u64) -> KernelField {
    let (_, k) = plane_fixture(size, width, seed);
    KernelField::new(
        Tensor::new(vec![1, width * width, size, size], k).expect("shape"),
        width,
    )
    .expect("odd width")
}

pub fn network_fixture(seed: u64) -> KpnParams {
    KpnParams::init(&KpnConfig::default(), seed).expect("default config is valid")
}
