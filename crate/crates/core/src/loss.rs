//! Training objective `L1 - lambda * SSIM` and the PSNR / SSIM metrics.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5), `C1 = (0.01 L)^2`,
//! `C2 = (0.03 L)^2`, valid-mode filtering, and is averaged over every
//! window position, channel and batch sample.

use crate::error::{invalid_arg, Result};
use crate::tensor::Tensor;

/// PSNR reported when the two images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window_size: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range).powi(2)
    }

    /// Normalised 1-D Gaussian; the 2-D window is its outer product.
    pub fn window_1d(&self) -> Vec<f64> {
        let centre = (self.window_size as f64 - 1.0) / 2.0;
        let raw: Vec<f64> = (0..self.window_size)
            .map(|i| {
                let d = i as f64 - centre;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub ssim_enabled: bool,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            ssim_enabled: true,
            ssim: SsimConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    /// `None` when the SSIM term is disabled.
    pub ssim: Option<f64>,
}

/// Mean absolute error.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    Ok(total / pred.len() as f64)
}

/// Gradient of [`l1_loss`] with respect to `pred`; 0 at exact ties.
pub fn l1_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let scale = 1.0 / pred.len() as f64;
    pred.zip_with(target, |a, b| {
        if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            0.0
        }
    })
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        let r = &mut rows[y * ow..(y + 1) * ow];
        for (x, out) in r.iter_mut().enumerate() {
            *out = win.iter().zip(&s[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for (i, &wt) in win.iter().enumerate() {
        for y in 0..oh {
            let r = &rows[(y + i) * ow..(y + i + 1) * ow];
            let o = &mut out[y * ow..(y + 1) * ow];
            o.iter_mut().zip(r).for_each(|(a, b)| *a += wt * b);
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters an `oh x ow` map back onto `h x w`.
fn filter_valid_adjoint(src: &[f64], h: usize, w: usize, win: &[f64]) -> Vec<f64> {
    let k = win.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for (i, &wt) in win.iter().enumerate() {
        for y in 0..oh {
            let s = &src[y * ow..(y + 1) * ow];
            let r = &mut rows[(y + i) * ow..(y + i + 1) * ow];
            r.iter_mut().zip(s).for_each(|(a, b)| *a += wt * b);
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let r = &rows[y * ow..(y + 1) * ow];
        let o = &mut out[y * w..(y + 1) * w];
        for (x, &v) in r.iter().enumerate() {
            for (j, &wt) in win.iter().enumerate() {
                o[x + j] += wt * v;
            }
        }
    }
    out
}

struct SsimMaps {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    a1: Vec<f64>,
    a2: Vec<f64>,
    b1: Vec<f64>,
    b2: Vec<f64>,
    index: Vec<f64>,
}

fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, config: &SsimConfig) -> SsimMaps {
    let win = config.window_1d();
    let (c1, c2) = (config.c1(), config.c2());
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = filter_valid(x, h, w, &win);
    let mu_y = filter_valid(y, h, w, &win);
    let e_xx = filter_valid(&xx, h, w, &win);
    let e_yy = filter_valid(&yy, h, w, &win);
    let e_xy = filter_valid(&xy, h, w, &win);
    let n = mu_x.len();
    let (mut a1, mut a2, mut b1, mut b2, mut index) = (
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
        vec![0.0; n],
    );
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        a1[i] = 2.0 * mx * my + c1;
        a2[i] = 2.0 * sxy + c2;
        b1[i] = mx * mx + my * my + c1;
        b2[i] = sxx + syy + c2;
        index[i] = (a1[i] * a2[i]) / (b1[i] * b2[i]);
    }
    SsimMaps {
        mu_x,
        mu_y,
        a1,
        a2,
        b1,
        b2,
        index,
    }
}

fn check_ssim_inputs(
    pred: &Tensor,
    target: &Tensor,
    config: &SsimConfig,
) -> Result<(usize, usize)> {
    pred.ensure_same_shape(target)?;
    let (_, _, h, w) = pred.dims4()?;
    if h < config.window_size || w < config.window_size {
        return Err(invalid_arg!(
            "image {h}x{w} is smaller than the {0}x{0} SSIM window",
            config.window_size
        ));
    }
    Ok((h, w))
}

/// Mean local SSIM over all window positions, channels and samples.
pub fn ssim(pred: &Tensor, target: &Tensor, config: &SsimConfig) -> Result<f64> {
    let (h, w) = check_ssim_inputs(pred, target, config)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (x, y) in pred
        .data()
        .chunks_exact(h * w)
        .zip(target.data().chunks_exact(h * w))
    {
        let maps = ssim_plane(x, y, h, w, config);
        total += maps.index.iter().sum::<f64>();
        count += maps.index.len();
    }
    Ok(total / count as f64)
}

/// Gradient of [`ssim`] with respect to `pred`.
pub fn ssim_backward(pred: &Tensor, target: &Tensor, config: &SsimConfig) -> Result<Tensor> {
    let (h, w) = check_ssim_inputs(pred, target, config)?;
    let win = config.window_1d();
    let planes = pred.len() / (h * w);
    let per_plane = (h - config.window_size + 1) * (w - config.window_size + 1);
    let g = 1.0 / (planes * per_plane) as f64;
    let mut grad = Vec::with_capacity(pred.len());
    for (x, y) in pred
        .data()
        .chunks_exact(h * w)
        .zip(target.data().chunks_exact(h * w))
    {
        let m = ssim_plane(x, y, h, w, config);
        let n = m.index.len();
        // dS/d(mu_x), dS/d(E[x^2]), dS/d(E[xy]) per window position
        let mut d_mu = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        for i in 0..n {
            let s = m.index[i];
            let (mx, my) = (m.mu_x[i], m.mu_y[i]);
            d_mu[i] = g
                * s
                * (2.0 * my / m.a1[i] - 2.0 * my / m.a2[i] - 2.0 * mx / m.b1[i]
                    + 2.0 * mx / m.b2[i]);
            d_exx[i] = -g * s / m.b2[i];
            d_exy[i] = g * 2.0 * s / m.a2[i];
        }
        let back_mu = filter_valid_adjoint(&d_mu, h, w, &win);
        let back_xx = filter_valid_adjoint(&d_exx, h, w, &win);
        let back_xy = filter_valid_adjoint(&d_exy, h, w, &win);
        for q in 0..h * w {
            grad.push(back_mu[q] + 2.0 * x[q] * back_xx[q] + y[q] * back_xy[q]);
        }
    }
    Tensor::new(pred.shape().to_vec(), grad)
}

/// `l1 - lambda * ssim`, or plain `l1` when SSIM is disabled.
pub fn combined_loss(pred: &Tensor, target: &Tensor, config: &LossConfig) -> Result<LossValue> {
    if config.lambda < 0.0 {
        return Err(invalid_arg!("lambda must be >= 0, got {}", config.lambda));
    }
    let l1 = l1_loss(pred, target)?;
    if !config.ssim_enabled {
        return Ok(LossValue {
            total: l1,
            l1,
            ssim: None,
        });
    }
    let s = ssim(pred, target, &config.ssim)?;
    Ok(LossValue {
        total: l1 - config.lambda * s,
        l1,
        ssim: Some(s),
    })
}

pub fn combined_loss_backward(
    pred: &Tensor,
    target: &Tensor,
    config: &LossConfig,
) -> Result<Tensor> {
    let mut grad = l1_loss_backward(pred, target)?;
    if config.ssim_enabled && config.lambda != 0.0 {
        let gs = ssim_backward(pred, target, &config.ssim)?;
        grad.data_mut()
            .iter_mut()
            .zip(gs.data())
            .for_each(|(a, b)| *a -= config.lambda * b);
    }
    Ok(grad)
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.ensure_same_shape(target)?;
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pred.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; identical inputs give [`PSNR_CAP_DB`].
pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    let err = mse(pred, target)?;
    if err == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// Rounds to the nearest 8-bit level (half up) after clamping to `[0, 1]`.
pub fn quantize_8bit(t: &Tensor) -> Tensor {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() / 255.0)
}
