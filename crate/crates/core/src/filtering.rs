//! Pixel-wise (dilated) filtering and multi-scale fusion.
//!
//! Every output pixel `p` is produced by its own `K x K` kernel `K_p`:
//!
//! ```text
//! out_l(p) = sum_t K_p(t) * image(p + l * t),   t in [-(K-1)/2, (K-1)/2]^2
//! ```
//!
//! Reads outside the image are zero. One kernel field is shared by every
//! colour channel and by every dilation factor `l`. The per-scale outputs are
//! concatenated in ascending-`l` order and fused by a 3x3 convolution.

use std::ops::{AddAssign, Mul};

use num_traits::Zero;
use rayon::prelude::*;

use crate::error::{invalid_arg, Result};
use crate::tensor::{concat_channels_backward, concat_channels_forward};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGrads, ConvLayerParams, Tensor};

/// Per-pixel kernels stored as `(N, K*K, H, W)`; channel `ky*K + kx` holds tap `(ky, kx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelField {
    data: Tensor,
    width: usize,
}

impl KernelField {
    pub fn new(data: Tensor, width: usize) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(invalid_arg!("kernel width {width} must be odd"));
        }
        let (_, c, _, _) = data.dims4()?;
        if c != width * width {
            return Err(invalid_arg!(
                "kernel field has {c} channels, width {width} needs {}",
                width * width
            ));
        }
        Ok(Self { data, width })
    }

    /// Centre tap 1, all others 0.
    pub fn delta(n: usize, width: usize, h: usize, w: usize) -> Result<Self> {
        let mut data = Tensor::zeros(&[n, width * width, h, w]);
        let centre = (width * width) / 2;
        for b in 0..n {
            let start = (b * width * width + centre) * h * w;
            data.data_mut()[start..start + h * w].fill(1.0);
        }
        Self::new(data, width)
    }

    /// All taps `1 / K^2`.
    pub fn uniform(n: usize, width: usize, h: usize, w: usize) -> Result<Self> {
        let value = 1.0 / (width * width) as f64;
        Self::new(Tensor::full(&[n, width * width, h, w], value), width)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn radius(&self) -> usize {
        (self.width - 1) / 2
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// The `K x K` kernel at pixel `(y, x)` of sample `n`, row-major.
    pub fn kernel_at(&self, n: usize, y: usize, x: usize) -> Vec<f64> {
        let (_, taps, h, w) = self.data.dims4().expect("kernel field is 4-d");
        (0..taps)
            .map(|t| self.data.data()[((n * taps + t) * h + y) * w + x])
            .collect()
    }
}

/// Ordered, duplicate-free, strictly positive dilation factors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DilationFactors(Vec<usize>);

impl DilationFactors {
    pub fn new(factors: Vec<usize>) -> Result<Self> {
        if factors.is_empty() {
            return Err(invalid_arg!("at least one dilation factor is required"));
        }
        if factors.contains(&0) {
            return Err(invalid_arg!(
                "dilation factors must be >= 1, got {factors:?}"
            ));
        }
        let mut sorted = factors.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != factors.len() {
            return Err(invalid_arg!("duplicate dilation factors in {factors:?}"));
        }
        Ok(Self(sorted))
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for DilationFactors {
    fn default() -> Self {
        Self(vec![1, 2, 3, 4])
    }
}

/// Fusion layer: a 3x3, padding-1 convolution from `scales * C` to `C` channels.
pub type FusionParams = ConvLayerParams;

/// Fusion weights that average the per-scale copies of each channel.
pub fn averaging_fusion(scales: usize, channels: usize) -> FusionParams {
    let mut params = ConvLayerParams::zeros(channels, scales * channels, 3, 1);
    let weight = 1.0 / scales as f64;
    for out_c in 0..channels {
        for s in 0..scales {
            let in_c = s * channels + out_c;
            let idx = ((out_c * scales * channels + in_c) * 3 + 1) * 3 + 1;
            params.weight.data_mut()[idx] = weight;
        }
    }
    params
}

fn check_pair(image: &Tensor, kernels: &KernelField) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = image.dims4()?;
    let (kn, _, kh, kw) = kernels.tensor().dims4()?;
    if (kh, kw) != (h, w) {
        return Err(invalid_arg!("kernel field is {kh}x{kw}, image is {h}x{w}"));
    }
    if kn != n {
        return Err(invalid_arg!("kernel field batch {kn} != image batch {n}"));
    }
    Ok((n, c, h, w))
}

/// Valid output range `[lo, hi)` along one axis for a signed offset.
#[inline]
fn valid_range(len: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Filters one `h x w` plane with a `(K*K, h, w)` kernel stack at dilation `dilation`.
///
/// Generic over the scalar so benchmarks can run the same loop in `f32`.
/// Per pixel, taps are accumulated in row-major order starting from zero.
/// Rows are processed one at a time so the output row stays in cache
/// across all taps.
pub fn dilated_filter_plane<T>(
    image: &[T],
    kernels: &[T],
    h: usize,
    w: usize,
    width: usize,
    dilation: usize,
    out: &mut [T],
) where
    T: Copy + Zero + Mul<Output = T> + AddAssign,
{
    let plane = h * w;
    assert_eq!(image.len(), plane);
    assert_eq!(kernels.len(), width * width * plane);
    assert_eq!(out.len(), plane);
    out.fill(T::zero());
    let r = ((width - 1) / 2) as isize;
    let l = dilation as isize;
    for y in 0..h {
        let orow = &mut out[y * w..(y + 1) * w];
        for ty in -r..=r {
            let sy = y as isize + ty * l;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let src = &image[sy as usize * w..(sy as usize + 1) * w];
            for tx in -r..=r {
                let tap = ((ty + r) * width as isize + (tx + r)) as usize;
                let krow = &kernels[tap * plane + y * w..tap * plane + (y + 1) * w];
                let dx = tx * l;
                let (x0, x1) = valid_range(w, dx);
                if x0 == x1 {
                    continue;
                }
                let shifted = &src[(x0 as isize + dx) as usize..(x1 as isize + dx) as usize];
                for ((o, &k), &s) in orow[x0..x1].iter_mut().zip(&krow[x0..x1]).zip(shifted) {
                    *o += k * s;
                }
            }
        }
    }
}

pub fn pixel_wise_filter(image: &Tensor, kernels: &KernelField) -> Result<Tensor> {
    pixel_wise_dilated_filter(image, kernels, 1)
}

pub fn pixel_wise_dilated_filter(
    image: &Tensor,
    kernels: &KernelField,
    dilation: usize,
) -> Result<Tensor> {
    if dilation < 1 {
        return Err(invalid_arg!("dilation factor must be >= 1, got {dilation}"));
    }
    let (n, c, h, w) = check_pair(image, kernels)?;
    let width = kernels.width();
    let taps = width * width;
    let mut out = vec![0.0; n * c * h * w];
    out.par_chunks_mut(h * w)
        .zip(image.data().par_chunks(h * w))
        .enumerate()
        .for_each(|(idx, (o, img))| {
            let b = idx / c;
            let k = &kernels.tensor().data()[b * taps * h * w..(b + 1) * taps * h * w];
            dilated_filter_plane(img, k, h, w, width, dilation, o);
        });
    Tensor::new(image.shape().to_vec(), out)
}

/// Adjoint of [`pixel_wise_dilated_filter`]: returns `(grad_image, grad_kernels)`.
pub fn pixel_wise_dilated_filter_backward(
    image: &Tensor,
    kernels: &KernelField,
    dilation: usize,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor)> {
    if dilation < 1 {
        return Err(invalid_arg!("dilation factor must be >= 1, got {dilation}"));
    }
    let (n, c, h, w) = check_pair(image, kernels)?;
    image.ensure_same_shape(grad_output)?;
    let width = kernels.width();
    let taps = width * width;
    let plane = h * w;
    let r = kernels.radius() as isize;
    let l = dilation as isize;

    let mut grad_image = vec![0.0; n * c * plane];
    let mut grad_kernels = vec![0.0; n * taps * plane];

    grad_image
        .par_chunks_mut(c * plane)
        .zip(grad_kernels.par_chunks_mut(taps * plane))
        .enumerate()
        .for_each(|(b, (gi, gk))| {
            let k = &kernels.tensor().data()[b * taps * plane..(b + 1) * taps * plane];
            for ch in 0..c {
                let img = image.plane(b, ch);
                let go = grad_output.plane(b, ch);
                let gi = &mut gi[ch * plane..(ch + 1) * plane];
                for ty in -r..=r {
                    for tx in -r..=r {
                        let tap = ((ty + r) * width as isize + (tx + r)) as usize;
                        let kt = &k[tap * plane..(tap + 1) * plane];
                        let gkt = &mut gk[tap * plane..(tap + 1) * plane];
                        let (dy, dx) = (ty * l, tx * l);
                        let (y0, y1) = valid_range(h, dy);
                        let (x0, x1) = valid_range(w, dx);
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            for x in x0..x1 {
                                let sx = (x as isize + dx) as usize;
                                let g = go[y * w + x];
                                gkt[y * w + x] += g * img[sy * w + sx];
                                gi[sy * w + sx] += kt[y * w + x] * g;
                            }
                        }
                    }
                }
            }
        });

    Ok((
        Tensor::new(image.shape().to_vec(), grad_image)?,
        Tensor::new(kernels.tensor().shape().to_vec(), grad_kernels)?,
    ))
}

fn check_fusion(derained: &[Tensor], params: &FusionParams) -> Result<()> {
    let first = derained
        .first()
        .ok_or_else(|| invalid_arg!("fusion needs at least one scale output"))?;
    let (_, c, _, _) = first.dims4()?;
    for t in derained {
        first.ensure_same_shape(t)?;
    }
    if params.in_channels() != derained.len() * c {
        return Err(invalid_arg!(
            "fusion expects {} input channels, got {} scales x {c} channels",
            params.in_channels(),
            derained.len()
        ));
    }
    if params.out_channels() != c || params.kernel_size() != (3, 3) || params.padding != 1 {
        return Err(invalid_arg!(
            "fusion must be a 3x3, padding-1 conv producing {c} channels"
        ));
    }
    Ok(())
}

/// Concatenates the per-scale outputs (ascending dilation) and applies the fusion conv.
pub fn fuse_scales(derained: &[Tensor], params: &FusionParams) -> Result<Tensor> {
    check_fusion(derained, params)?;
    let parts: Vec<&Tensor> = derained.iter().collect();
    conv2d_forward(&concat_channels_forward(&parts)?, params)
}

/// Returns the gradient for each scale output and for the fusion parameters.
pub fn fuse_scales_backward(
    derained: &[Tensor],
    params: &FusionParams,
    grad_output: &Tensor,
) -> Result<(Vec<Tensor>, ConvGrads)> {
    check_fusion(derained, params)?;
    let parts: Vec<&Tensor> = derained.iter().collect();
    let stacked = concat_channels_forward(&parts)?;
    let (grad_stacked, grads) = conv2d_backward(&stacked, params, grad_output)?;
    let channels: Vec<usize> = derained.iter().map(|t| t.shape()[1]).collect();
    Ok((concat_channels_backward(&grad_stacked, &channels)?, grads))
}

/// Softmax over the `K*K` taps at every pixel.
pub fn normalize_kernels(logits: &Tensor, width: usize) -> Result<KernelField> {
    let (n, taps, h, w) = logits.dims4()?;
    let plane = h * w;
    let mut out = logits.clone();
    for b in 0..n {
        let block = &mut out.data_mut()[b * taps * plane..(b + 1) * taps * plane];
        for p in 0..plane {
            let max = (0..taps)
                .map(|t| block[t * plane + p])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for t in 0..taps {
                let e = (block[t * plane + p] - max).exp();
                block[t * plane + p] = e;
                total += e;
            }
            for t in 0..taps {
                block[t * plane + p] /= total;
            }
        }
    }
    KernelField::new(out, width)
}

/// Backward of [`normalize_kernels`] given its output.
pub fn normalize_kernels_backward(normalized: &KernelField, grad: &Tensor) -> Result<Tensor> {
    let probs = normalized.tensor();
    probs.ensure_same_shape(grad)?;
    let (n, taps, h, w) = probs.dims4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(probs.shape());
    for b in 0..n {
        let base = b * taps * plane;
        for p in 0..plane {
            let dot: f64 = (0..taps)
                .map(|t| probs.data()[base + t * plane + p] * grad.data()[base + t * plane + p])
                .sum();
            for t in 0..taps {
                let i = base + t * plane + p;
                out.data_mut()[i] = probs.data()[i] * (grad.data()[i] - dot);
            }
        }
    }
    Ok(out)
}
