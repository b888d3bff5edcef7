use rayon::prelude::*;

use super::{debug_check_finite, Tensor};
use crate::error::{invalid_arg, Result};

/// Weights `(C_out, C_in, k_h, k_w)`, bias `(C_out)`, zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients with respect to a [`ConvLayerParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvLayerParams {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c_out, _, kh, kw) = weight
            .dims4()
            .map_err(|_| invalid_arg!("conv weight must be (C_out, C_in, k_h, k_w)"))?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(invalid_arg!("conv kernel {kh}x{kw} must have odd sides"));
        }
        if bias.shape() != [c_out] {
            return Err(invalid_arg!(
                "conv bias shape {:?} does not match C_out={c_out}",
                bias.shape()
            ));
        }
        if stride == 0 {
            return Err(invalid_arg!("conv stride must be positive"));
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// Zero weights and bias.
    pub fn zeros(c_out: usize, c_in: usize, kernel: usize, padding: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel]),
            bias: Tensor::zeros(&[c_out]),
            stride: 1,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_size();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < kh {
            return Err(invalid_arg!(
                "conv input height {h} too small for {kh}-tall kernel"
            ));
        }
        if pw < kw {
            return Err(invalid_arg!(
                "conv input width {w} too small for {kw}-wide kernel"
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    fn geometry(&self, input: &Tensor) -> Result<Geometry> {
        let (n, c, h, w) = input.dims4()?;
        if c != self.in_channels() {
            return Err(invalid_arg!(
                "conv input has C={c}, weights expect C_in={}",
                self.in_channels()
            ));
        }
        let (kh, kw) = self.kernel_size();
        let (oh, ow) = self.output_size(h, w)?;
        Ok(Geometry {
            n,
            c_in: c,
            h,
            w,
            c_out: self.out_channels(),
            kh,
            kw,
            oh,
            ow,
            stride: self.stride,
            pad: self.padding,
        })
    }
}

/// Target size of one im2col block, small enough to stay in L2.
const COLUMN_BLOCK: usize = 1 << 15;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// 1x1, stride 1, no padding: the input plane block already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output row ranges whose column block stays around `COLUMN_BLOCK` elements.
    /// Pointwise layers use a single block since their columns are the input itself.
    fn row_blocks(&self) -> impl Iterator<Item = (usize, usize)> {
        let rows = if self.is_pointwise() {
            self.oh.max(1)
        } else {
            (COLUMN_BLOCK / (self.patch_len() * self.ow).max(1)).max(1)
        };
        let oh = self.oh;
        (0..oh)
            .step_by(rows)
            .map(move |r0| (r0, (r0 + rows).min(oh)))
    }
}

pub fn conv2d_forward(input: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    let g = params.geometry(input)?;
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let mut out = vec![0.0; g.n * out_sample];
    let weight = params.weight.data();
    let bias = params.bias.data();

    out.par_chunks_mut(out_sample.max(1))
        .zip(input.data().par_chunks(in_sample.max(1)))
        .for_each(|(y, x)| {
            let mut scratch = Vec::new();
            for (r0, r1) in g.row_blocks() {
                let cols = columns(x, &g, r0, r1, &mut scratch);
                let nb = (r1 - r0) * g.ow;
                gemm_strided(
                    MatView::row_major(weight, g.c_out, g.patch_len()),
                    MatView::row_major(cols, g.patch_len(), nb),
                    &mut y[r0 * g.ow..],
                    g.out_plane(),
                    0.0,
                );
            }
            for (plane, &b) in y.chunks_exact_mut(g.out_plane()).zip(bias) {
                plane.iter_mut().for_each(|v| *v += b);
            }
        });

    let out = Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)?;
    debug_check_finite(&out, "conv2d_forward");
    Ok(out)
}

pub fn conv2d_backward(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_output: &Tensor,
) -> Result<(Tensor, ConvGrads)> {
    let (grad_input, grads) = conv2d_backward_impl(input, params, grad_output, true)?;
    Ok((grad_input.expect("input gradient requested"), grads))
}

/// Backward pass that can skip the input gradient (first layer of a network).
pub(crate) fn conv2d_backward_impl(
    input: &Tensor,
    params: &ConvLayerParams,
    grad_output: &Tensor,
    need_input_grad: bool,
) -> Result<(Option<Tensor>, ConvGrads)> {
    let g = params.geometry(input)?;
    let expected = [g.n, g.c_out, g.oh, g.ow];
    if grad_output.shape() != expected {
        return Err(invalid_arg!(
            "conv grad_output shape {:?} does not match forward output {:?}",
            grad_output.shape(),
            expected
        ));
    }
    let in_sample = g.c_in * g.h * g.w;
    let out_sample = g.c_out * g.out_plane();
    let weight = params.weight.data();

    let per_sample = |x: &[f64], dy: &[f64], mut dx: Option<&mut [f64]>| -> (Vec<f64>, Vec<f64>) {
        let mut scratch = Vec::new();
        let mut dcols = Vec::new();
        let mut gw = vec![0.0; weight.len()];
        for (i, (r0, r1)) in g.row_blocks().enumerate() {
            let nb = (r1 - r0) * g.ow;
            let dy_block = MatView::strided(&dy[r0 * g.ow..], g.c_out, nb, g.out_plane(), 1);
            let cols = columns(x, &g, r0, r1, &mut scratch);
            // dW += dY_block · cols_blockᵀ
            gemm(
                dy_block,
                MatView::transposed(cols, nb, g.patch_len()),
                &mut gw,
                if i == 0 { 0.0 } else { 1.0 },
            );
            if let Some(dx) = dx.as_deref_mut() {
                // dcols = Wᵀ · dY_block, then scatter back onto the input grid
                dcols.clear();
                dcols.resize(g.patch_len() * nb, 0.0);
                gemm(
                    MatView::transposed(weight, g.patch_len(), g.c_out),
                    dy_block,
                    &mut dcols,
                    0.0,
                );
                if g.is_pointwise() {
                    dx.copy_from_slice(&dcols);
                } else {
                    col2im(&dcols, &g, r0, r1, dx);
                }
            }
        }
        let gb: Vec<f64> = dy
            .chunks_exact(g.out_plane().max(1))
            .map(|plane| plane.iter().sum())
            .collect();
        (gw, gb)
    };

    let samples = input.data().par_chunks(in_sample.max(1));
    let grads_out = grad_output.data().par_chunks(out_sample.max(1));
    let mut grad_input = need_input_grad.then(|| vec![0.0; g.n * in_sample]);
    let partials: Vec<(Vec<f64>, Vec<f64>)> = match grad_input.as_mut() {
        Some(gi) => samples
            .zip(grads_out)
            .zip(gi.par_chunks_mut(in_sample.max(1)))
            .map(|((x, dy), dx)| per_sample(x, dy, Some(dx)))
            .collect(),
        None => samples
            .zip(grads_out)
            .map(|(x, dy)| per_sample(x, dy, None))
            .collect(),
    };

    // fixed-order reduction over the batch
    let mut gw = vec![0.0; weight.len()];
    let mut gb = vec![0.0; g.c_out];
    for (pw, pb) in &partials {
        gw.iter_mut().zip(pw).for_each(|(a, b)| *a += b);
        gb.iter_mut().zip(pb).for_each(|(a, b)| *a += b);
    }

    let grads = ConvGrads {
        weight: Tensor::new(params.weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![g.c_out], gb)?,
    };
    let grad_input = grad_input
        .map(|gi| Tensor::new(input.shape().to_vec(), gi))
        .transpose()?;
    Ok((grad_input, grads))
}

/// Column matrix `(C_in*k_h*k_w, (r1-r0)*W_out)` for output rows `r0..r1` of one sample.
fn columns<'a>(
    x: &'a [f64],
    g: &Geometry,
    r0: usize,
    r1: usize,
    scratch: &'a mut Vec<f64>,
) -> &'a [f64] {
    if g.is_pointwise() {
        return x;
    }
    scratch.clear();
    scratch.resize(g.patch_len() * (r1 - r0) * g.ow, 0.0);
    im2col(x, g, r0, r1, scratch);
    scratch
}

/// Output columns `ox` whose input column `ox*stride + kx - pad` is in bounds.
fn valid_cols(g: &Geometry, kx: usize) -> std::ops::Range<usize> {
    let first = g.pad.saturating_sub(kx).div_ceil(g.stride);
    let last = (g.w + g.pad)
        .checked_sub(kx + 1)
        .map_or(0, |m| (m / g.stride + 1).min(g.ow));
    first.min(last)..last
}

fn im2col(x: &[f64], g: &Geometry, r0: usize, r1: usize, cols: &mut [f64]) {
    let nb = (r1 - r0) * g.ow;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * nb..(row + 1) * nb];
                let xs = valid_cols(g, kx);
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let out_row = &mut dst[(oy - r0) * g.ow..(oy - r0 + 1) * g.ow];
                    if xs.is_empty() {
                        continue;
                    }
                    let i0 = xs.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[xs.clone()].copy_from_slice(&src[i0..i0 + xs.len()]);
                    } else {
                        for (j, v) in out_row[xs.clone()].iter_mut().enumerate() {
                            *v = src[i0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &Geometry, r0: usize, r1: usize, dx: &mut [f64]) {
    let nb = (r1 - r0) * g.ow;
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * nb..(row + 1) * nb];
                let xs = valid_cols(g, kx);
                if xs.is_empty() {
                    continue;
                }
                let i0 = xs.start * g.stride + kx - g.pad;
                for oy in r0..r1 {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let vals = &src[(oy - r0) * g.ow + xs.start..(oy - r0) * g.ow + xs.end];
                    for (j, &v) in vals.iter().enumerate() {
                        dst[i0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
}

/// Strided read-only matrix view over a slice.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    row_stride: usize,
    col_stride: usize,
}

impl<'a> MatView<'a> {
    pub(crate) fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub(crate) fn strided(
        data: &'a [f64],
        rows: usize,
        cols: usize,
        row_stride: usize,
        col_stride: usize,
    ) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride,
            col_stride,
        }
    }

    /// View of the transpose of a row-major `(cols, rows)` matrix.
    pub(crate) fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            row_stride: 1,
            col_stride: rows,
        }
    }

    fn assert_in_bounds(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view exceeds its buffer");
        }
    }
}

/// `c = a · b + beta · c`, with `c` row-major `(a.rows, b.cols)`.
pub(crate) fn gemm(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(c.len(), a.rows * b.cols, "gemm output has the wrong size");
    gemm_strided(a, b, c, b.cols, beta);
}

/// As [`gemm`], with `c` holding rows of `b.cols` values `ldc` elements apart.
pub(crate) fn gemm_strided(a: MatView<'_>, b: MatView<'_>, c: &mut [f64], ldc: usize, beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    a.assert_in_bounds();
    b.assert_in_bounds();
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    assert!(ldc >= b.cols, "gemm output stride shorter than a row");
    assert!(
        (a.rows - 1) * ldc + b.cols <= c.len(),
        "gemm output exceeds its buffer"
    );
    if a.cols == 0 {
        for r in 0..a.rows {
            c[r * ldc..r * ldc + b.cols]
                .iter_mut()
                .for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: both input views and the strided output were bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}
