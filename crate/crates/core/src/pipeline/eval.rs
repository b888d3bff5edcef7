//! PSNR/SSIM evaluation over a dataset.

use std::fmt::Write as _;

use crate::error::{invalid_arg, Result};
use crate::kpn::{derain, KpnParams};
use crate::loss::{psnr, quantize_8bit, ssim, SsimConfig};
use crate::pipeline::dataset::Dataset;
use crate::tensor::Tensor;

pub const REPORT_HEADER: &str = "image,psnr,ssim";

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid_arg!("cannot summarise an empty evaluation"));
        }
        let n = rows.len() as f64;
        let mean_psnr = rows.iter().map(|r| r.psnr).sum::<f64>() / n;
        let mean_ssim = rows.iter().map(|r| r.ssim).sum::<f64>() / n;
        Ok(Self {
            rows,
            mean_psnr,
            mean_ssim,
        })
    }

    /// Header, one row per image, then a `mean` row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{:.6},{:.6}", r.name, r.psnr, r.ssim).expect("string write");
        }
        writeln!(s, "mean,{:.6},{:.6}", self.mean_psnr, self.mean_ssim).expect("string write");
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "{} images: mean PSNR {:.3} dB, mean SSIM {:.4}",
            self.rows.len(),
            self.mean_psnr,
            self.mean_ssim
        )
    }
}

/// PSNR (unit peak) and SSIM of one prediction after 8-bit quantisation.
pub fn image_metrics(pred: &Tensor, target: &Tensor) -> Result<(f64, f64)> {
    let q = quantize_8bit(pred);
    Ok((
        psnr(&q, target, 1.0)?,
        ssim(&q, target, &SsimConfig::default())?,
    ))
}

/// Pads bottom and right edges by replication so both dims are multiples of `m`.
pub fn pad_replicate(image: &Tensor, m: usize) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in src.chunks_exact(h * w) {
        for y in 0..ph {
            let row = &plane[y.min(h - 1) * w..(y.min(h - 1) + 1) * w];
            out.extend_from_slice(row);
            out.extend(std::iter::repeat_n(row[w - 1], pw - w));
        }
    }
    Tensor::new(vec![n, c, ph, pw], out)
}

/// Derains an image of any size: pad to the network multiple, run, crop back.
pub fn derain_image(params: &KpnParams, image: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = image.dims4()?;
    if c != params.config.input_channels {
        return Err(invalid_arg!(
            "image has {c} channels but the checkpoint expects {}",
            params.config.input_channels
        ));
    }
    let padded = pad_replicate(image, params.config.required_multiple())?;
    derain(params, &padded)?.crop(0, 0, h, w)
}

/// Metrics of the network's output against the clean images.
pub fn evaluate(params: &KpnParams, dataset: &Dataset) -> Result<EvalReport> {
    let rows = dataset
        .pairs
        .iter()
        .map(|p| {
            let out = derain_image(params, &p.rainy)?;
            let (psnr, ssim) = image_metrics(&out, &p.clean)?;
            Ok(EvalRow {
                name: p.name.clone(),
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

/// Metrics of the rainy inputs themselves, the no-network reference.
pub fn evaluate_inputs(dataset: &Dataset) -> Result<EvalReport> {
    let rows = dataset
        .pairs
        .iter()
        .map(|p| {
            let (psnr, ssim) = image_metrics(&p.rainy, &p.clean)?;
            Ok(EvalRow {
                name: p.name.clone(),
                psnr,
                ssim,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}
