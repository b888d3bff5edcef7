//! Straight-line reimplementations used as references. Loops follow the
//! textbook definitions directly; nothing here shares code with the library.

use super::filter_oracle;
use derain_core::kpn::KpnParams;
use derain_core::{ConvLayerParams, KernelField, Tensor};

fn at(t: &Tensor, b: usize, c: usize, y: usize, x: usize) -> f64 {
    let (_, cs, h, w) = t.dims4().unwrap();
    t.data()[((b * cs + c) * h + y) * w + x]
}

/// Cross-correlation with zero padding, summed in `(ci, ky, kx)` order.
pub fn conv(input: &Tensor, p: &ConvLayerParams) -> Tensor {
    let (n, ci, h, w) = input.dims4().unwrap();
    let (co, _, kh, kw) = p.weight.dims4().unwrap();
    let (s, pad) = (p.stride as isize, p.padding as isize);
    let ho = (h as isize + 2 * pad - kh as isize) / s + 1;
    let wo = (w as isize + 2 * pad - kw as isize) / s + 1;
    let (ho, wo) = (ho as usize, wo as usize);
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for x in 0..wo {
                    let mut acc = p.bias.data()[o];
                    for c in 0..ci {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let sy = y as isize * s + ky as isize - pad;
                                let sx = x as isize * s + kx as isize - pad;
                                if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                    continue;
                                }
                                acc += at(&p.weight, o, c, ky, kx)
                                    * at(input, b, c, sy as usize, sx as usize);
                            }
                        }
                    }
                    out.data_mut()[((b * co + o) * ho + y) * wo + x] = acc;
                }
            }
        }
    }
    out
}

pub fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

pub fn avgpool(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4().unwrap();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    let s = at(t, b, ch, 2 * y, 2 * x)
                        + at(t, b, ch, 2 * y, 2 * x + 1)
                        + at(t, b, ch, 2 * y + 1, 2 * x)
                        + at(t, b, ch, 2 * y + 1, 2 * x + 1);
                    out.data_mut()[((b * c + ch) * ho + y) * wo + x] = s / 4.0;
                }
            }
        }
    }
    out
}

pub fn upsample(t: &Tensor) -> Tensor {
    let (n, c, h, w) = t.dims4().unwrap();
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..ho {
                for x in 0..wo {
                    out.data_mut()[((b * c + ch) * ho + y) * wo + x] = at(t, b, ch, y / 2, x / 2);
                }
            }
        }
    }
    out
}

pub fn concat(parts: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = parts[0].dims4().unwrap();
    let total: usize = parts.iter().map(|p| p.dims4().unwrap().1).sum();
    let mut data = Vec::with_capacity(n * total * h * w);
    for b in 0..n {
        for p in parts {
            let c = p.dims4().unwrap().1;
            data.extend_from_slice(&p.data()[b * c * h * w..(b + 1) * c * h * w]);
        }
    }
    Tensor::new(vec![n, total, h, w], data).unwrap()
}

pub fn softmax_taps(logits: &Tensor) -> Tensor {
    let (n, taps, h, w) = logits.dims4().unwrap();
    let mut out = logits.clone();
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                let vals: Vec<f64> = (0..taps).map(|t| at(logits, b, t, y, x)).collect();
                let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = vals.iter().map(|v| (v - max).exp()).sum();
                for (t, v) in vals.iter().enumerate() {
                    out.data_mut()[((b * taps + t) * h + y) * w + x] = (v - max).exp() / total;
                }
            }
        }
    }
    out
}

/// Encoder, decoder with `[upsampled, skip]` concatenation, head, per-scale
/// filtering, fusion.
pub fn derain(params: &KpnParams, image: &Tensor) -> Tensor {
    let block = |b: &derain_core::kpn::ConvBlock, x: &Tensor| {
        relu(&conv(&relu(&conv(x, &b.first)), &b.second))
    };
    let mut skips = Vec::new();
    let mut x = image.clone();
    for (level, b) in params.encoder.iter().enumerate() {
        if level > 0 {
            x = avgpool(&x);
        }
        x = block(b, &x);
        skips.push(x.clone());
    }
    skips.pop();
    for b in params.decoder.iter().rev() {
        let skip = skips.pop().unwrap();
        x = block(b, &concat(&[&upsample(&x), &skip]));
    }
    let mut logits = conv(&x, &params.head);
    if params.config.normalize_kernels {
        logits = softmax_taps(&logits);
    }
    let kernels = KernelField::new(logits, params.config.kernel_width).unwrap();
    let scales: Vec<Tensor> = params
        .config
        .dilations
        .as_slice()
        .iter()
        .map(|&l| filter_oracle(image, &kernels, l))
        .collect();
    let parts: Vec<&Tensor> = scales.iter().collect();
    conv(&concat(&parts), &params.fusion)
}
