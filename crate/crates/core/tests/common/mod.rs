//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use derain_core::{KernelField, PinnedRng, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-5;
/// Central differences carry round-off of about `eps * |f| / FD_STEP`, so gradient
/// entries smaller than `NOISE_FLOOR * max(1, |f|)` are compared on that scale
/// instead of their own.
pub const NOISE_FLOOR: f64 = 1e-5;

pub fn rng(seed: u64) -> PinnedRng {
    PinnedRng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut PinnedRng) -> Tensor {
    Tensor::random_uniform(shape, lo, hi, rng)
}

pub fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

pub fn rel_err(analytic: f64, numeric: f64, f_value: f64) -> f64 {
    let floor = NOISE_FLOOR * f_value.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` in coordinate `i` of `x`.
pub fn central_diff(x: &Tensor, i: usize, f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let mut p = x.clone();
    p.data_mut()[i] = x.data()[i] + FD_STEP;
    let plus = f(&p);
    p.data_mut()[i] = x.data()[i] - FD_STEP;
    let minus = f(&p);
    (plus - minus) / (2.0 * FD_STEP)
}

/// Max relative error of `analytic` against central differences of `f` over
/// `count` random coordinates of `x` (all of them when `x` is smaller).
pub fn max_grad_err(
    x: &Tensor,
    analytic: &Tensor,
    f: &dyn Fn(&Tensor) -> f64,
    count: usize,
    rng: &mut PinnedRng,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let f0 = f(x);
    let coords = sample(rng, x.len(), count.min(x.len()));
    coords
        .iter()
        .map(|i| rel_err(analytic.data()[i], central_diff(x, i, f), f0))
        .fold(0.0, f64::max)
}

/// Direct-summation pixel-wise dilated filter, zero padded.
pub fn filter_oracle(image: &Tensor, kernels: &KernelField, dilation: usize) -> Tensor {
    let (n, c, h, w) = image.dims4().unwrap();
    let k = kernels.width();
    let r = (k / 2) as isize;
    let l = dilation as isize;
    let mut out = Tensor::zeros(image.shape());
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let taps = kernels.kernel_at(b, y, x);
                    let mut acc = 0.0;
                    for ty in -r..=r {
                        for tx in -r..=r {
                            let (sy, sx) = (y as isize + ty * l, x as isize + tx * l);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            let tap = ((ty + r) * k as isize + tx + r) as usize;
                            acc += taps[tap] * image.plane(b, ch)[sy as usize * w + sx as usize];
                        }
                    }
                    out.data_mut()[((b * c + ch) * h + y) * w + x] = acc;
                }
            }
        }
    }
    out
}

pub fn random_kernels(
    n: usize,
    width: usize,
    h: usize,
    w: usize,
    rng: &mut PinnedRng,
) -> KernelField {
    KernelField::new(uniform(&[n, width * width, h, w], -1.0, 1.0, rng), width).unwrap()
}

/// Random size in `lo..=hi`.
pub fn size(rng: &mut PinnedRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}
pub mod grad_suite;
pub mod oracles;
