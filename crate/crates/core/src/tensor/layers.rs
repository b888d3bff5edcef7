use super::{debug_check_finite, Tensor};
use crate::error::{invalid_arg, Result};

pub fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// `x` is the forward input; the subgradient at 0 is taken as 0.
pub fn relu_backward(x: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_output, |v, g| if v > 0.0 { g } else { 0.0 })
}

pub fn avgpool2x2_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(invalid_arg!(
            "avgpool2x2 needs even spatial dims, got {h}x{w}"
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in x.data().chunks_exact(h * w) {
        for oy in 0..oh {
            let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
            let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
            for ox in 0..ow {
                out.push(0.25 * (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]));
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    debug_check_finite(&out, "avgpool2x2_forward");
    Ok(out)
}

pub fn avgpool2x2_backward(grad_output: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_output.dims4()?;
    if input_shape != [n, c, 2 * oh, 2 * ow] {
        return Err(invalid_arg!(
            "avgpool2x2 grad {:?} inconsistent with input shape {input_shape:?}",
            grad_output.shape()
        ));
    }
    let w = 2 * ow;
    let mut out = Tensor::zeros(input_shape);
    for (src, dst) in grad_output
        .data()
        .chunks_exact(oh * ow)
        .zip(out.data_mut().chunks_exact_mut(4 * oh * ow))
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = 0.25 * src[oy * ow + ox];
                dst[2 * oy * w + 2 * ox] = g;
                dst[2 * oy * w + 2 * ox + 1] = g;
                dst[(2 * oy + 1) * w + 2 * ox] = g;
                dst[(2 * oy + 1) * w + 2 * ox + 1] = g;
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_forward(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let ow = 2 * w;
    let mut out = Tensor::zeros(&[n, c, 2 * h, ow]);
    for (src, dst) in x
        .data()
        .chunks_exact(h * w)
        .zip(out.data_mut().chunks_exact_mut(4 * h * w))
    {
        for y in 0..h {
            for x in 0..w {
                let v = src[y * w + x];
                dst[2 * y * ow + 2 * x] = v;
                dst[2 * y * ow + 2 * x + 1] = v;
                dst[(2 * y + 1) * ow + 2 * x] = v;
                dst[(2 * y + 1) * ow + 2 * x + 1] = v;
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward(grad_output: &Tensor) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_output.dims4()?;
    if oh % 2 != 0 || ow % 2 != 0 {
        return Err(invalid_arg!(
            "upsample2x gradient must have even spatial dims, got {oh}x{ow}"
        ));
    }
    let (h, w) = (oh / 2, ow / 2);
    let mut out = Vec::with_capacity(n * c * h * w);
    for src in grad_output.data().chunks_exact(oh * ow) {
        for y in 0..h {
            for x in 0..w {
                out.push(
                    src[2 * y * ow + 2 * x]
                        + src[2 * y * ow + 2 * x + 1]
                        + src[(2 * y + 1) * ow + 2 * x]
                        + src[(2 * y + 1) * ow + 2 * x + 1],
                );
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Concatenates along the channel axis in the given order.
pub fn concat_channels_forward(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| invalid_arg!("concat needs at least one tensor"))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(invalid_arg!(
                "concat needs matching (N, H, W): {:?} vs {:?}",
                (n, h, w),
                (pn, ph, pw)
            ));
        }
        total_c += pc;
    }
    let mut out = Vec::with_capacity(n * total_c * h * w);
    for b in 0..n {
        for p in parts {
            let block = p.shape()[1] * h * w;
            out.extend_from_slice(&p.data()[b * block..(b + 1) * block]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into parts with the given channel counts.
pub fn concat_channels_backward(grad_output: &Tensor, channels: &[usize]) -> Result<Vec<Tensor>> {
    let (n, c, h, w) = grad_output.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(invalid_arg!(
            "concat split {channels:?} does not sum to C={c}"
        ));
    }
    let mut parts: Vec<Vec<f64>> = channels
        .iter()
        .map(|&pc| Vec::with_capacity(n * pc * h * w))
        .collect();
    for sample in grad_output.data().chunks_exact(c * h * w) {
        let mut offset = 0;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&sample[offset..offset + pc * h * w]);
            offset += pc * h * w;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(data, &pc)| Tensor::new(vec![n, pc, h, w], data))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::full(&[3], 5.0);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn avgpool_constant_is_constant() {
        let x = Tensor::full(&[2, 3, 4, 6], 1.0);
        let y = avgpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn avgpool_rejects_odd_dims() {
        assert!(avgpool2x2_forward(&Tensor::zeros(&[1, 1, 3, 4])).is_err());
        assert!(avgpool2x2_forward(&Tensor::zeros(&[1, 1, 4, 5])).is_err());
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64);
        let y = avgpool2x2_forward(&upsample_nearest2x_forward(&x).unwrap()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn concat_round_trip() {
        let a = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 2, 2], |i| 100.0 + i as f64);
        let cat = concat_channels_forward(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 4, 2, 2]);
        assert_eq!(cat.plane(1, 0), a.plane(1, 0));
        assert_eq!(cat.plane(1, 2), b.plane(1, 1));
        let parts = concat_channels_backward(&cat, &[1, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::zeros(&[1, 1, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 3]);
        assert!(concat_channels_forward(&[&a, &b]).is_err());
        assert!(concat_channels_backward(&a, &[2]).is_err());
    }
}
