//! Wall-clock timing of the derain stages.

use std::fmt;
use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;

use crate::error::{invalid_arg, Result};
use crate::filtering::{fuse_scales, pixel_wise_dilated_filter, KernelField};
use crate::kpn::{derain, kpn_forward, KpnParams};
use crate::rng::PinnedRng;
use crate::tensor::Tensor;

pub const MIN_REPETITIONS: usize = 10;
const WARMUP_RUNS: usize = 2;

pub const STAGE_KPN: &str = "kpn_forward";
pub const STAGE_FILTERING: &str = "filtering";
pub const STAGE_END_TO_END: &str = "end_to_end";

#[derive(Clone, Debug, PartialEq)]
pub struct StageTiming {
    pub name: &'static str,
    pub median_ms: f64,
    pub p95_ms: f64,
}

impl StageTiming {
    fn from_samples(name: &'static str, mut samples: Vec<f64>) -> Self {
        samples.sort_by(f64::total_cmp);
        Self {
            name,
            median_ms: percentile(&samples, 0.5),
            p95_ms: percentile(&samples, 0.95),
        }
    }
}

/// Nearest-rank percentile of sorted samples.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyReport {
    pub height: usize,
    pub width: usize,
    pub repetitions: usize,
    /// `kpn_forward`, `filtering` (all dilated filters plus fusion), `end_to_end`.
    pub stages: Vec<StageTiming>,
    /// Median of one undilated filter pass without fusion.
    pub single_scale_ms: f64,
}

impl LatencyReport {
    pub fn stage(&self, name: &str) -> Option<&StageTiming> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Extra cost of the multi-scale filtering stage over a single scale.
    pub fn filtering_delta_ms(&self) -> f64 {
        self.stage(STAGE_FILTERING).map_or(0.0, |s| s.median_ms) - self.single_scale_ms
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "latency {}x{}, {} repetitions",
            self.height, self.width, self.repetitions
        )?;
        for s in &self.stages {
            writeln!(
                f,
                "  {:<12} median {:>9.3} ms  p95 {:>9.3} ms",
                s.name, s.median_ms, s.p95_ms
            )?;
        }
        write!(
            f,
            "  filtering delta over single scale: {:.3} ms",
            self.filtering_delta_ms()
        )
    }
}

fn time_runs(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<Vec<f64>> {
    for _ in 0..WARMUP_RUNS {
        f()?;
    }
    (0..reps)
        .map(|_| {
            let start = Instant::now();
            f()?;
            Ok(start.elapsed().as_secs_f64() * 1e3)
        })
        .collect()
}

fn check_reps(reps: usize) -> Result<()> {
    if reps < MIN_REPETITIONS {
        return Err(invalid_arg!(
            "need at least {MIN_REPETITIONS} repetitions, got {reps}"
        ));
    }
    Ok(())
}

fn test_image(params: &KpnParams, height: usize, width: usize, seed: u64) -> Tensor {
    let shape = [1, params.config.input_channels, height, width];
    Tensor::random_uniform(&shape, 0.0, 1.0, &mut PinnedRng::seed_from_u64(seed))
}

fn filter_all(params: &KpnParams, image: &Tensor, kernels: &KernelField) -> Result<Tensor> {
    let scales = params
        .config
        .dilations
        .as_slice()
        .iter()
        .map(|&l| pixel_wise_dilated_filter(image, kernels, l))
        .collect::<Result<Vec<_>>>()?;
    fuse_scales(&scales, &params.fusion)
}

/// Times each stage on a seeded random image after warm-up runs.
pub fn benchmark_latency(
    params: &KpnParams,
    height: usize,
    width: usize,
    repetitions: usize,
    seed: u64,
) -> Result<LatencyReport> {
    check_reps(repetitions)?;
    let image = test_image(params, height, width, seed);
    params.config.check_input(&image)?;
    let kernels = kpn_forward(params, &image)?;

    let kpn = time_runs(repetitions, || {
        black_box(kpn_forward(params, &image)?);
        Ok(())
    })?;
    let filtering = time_runs(repetitions, || {
        black_box(filter_all(params, &image, &kernels)?);
        Ok(())
    })?;
    let single = time_runs(repetitions, || {
        black_box(pixel_wise_dilated_filter(&image, &kernels, 1)?);
        Ok(())
    })?;
    let end_to_end = time_runs(repetitions, || {
        black_box(derain(params, &image)?);
        Ok(())
    })?;

    Ok(LatencyReport {
        height,
        width,
        repetitions,
        stages: vec![
            StageTiming::from_samples(STAGE_KPN, kpn),
            StageTiming::from_samples(STAGE_FILTERING, filtering),
            StageTiming::from_samples(STAGE_END_TO_END, end_to_end),
        ],
        single_scale_ms: StageTiming::from_samples("single", single).median_ms,
    })
}

/// Median time of one dilated filter pass at each factor, same kernels throughout.
pub fn filtering_per_dilation(
    params: &KpnParams,
    size: usize,
    dilations: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    check_reps(repetitions)?;
    let image = test_image(params, size, size, seed);
    let kernels = kpn_forward(params, &image)?;
    dilations
        .iter()
        .map(|&l| {
            let t = time_runs(repetitions, || {
                black_box(pixel_wise_dilated_filter(&image, &kernels, l)?);
                Ok(())
            })?;
            Ok((l, StageTiming::from_samples("dilation", t).median_ms))
        })
        .collect()
}

/// `(max - min) / min` of the per-dilation medians.
pub fn relative_spread(timings: &[(usize, f64)]) -> f64 {
    let lo = timings.iter().map(|t| t.1).fold(f64::INFINITY, f64::min);
    let hi = timings.iter().map(|t| t.1).fold(0.0, f64::max);
    (hi - lo) / lo
}

/// Filtering-stage median at `size` and at `2 * size`, with their ratio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalingReport {
    pub size: usize,
    pub base_ms: f64,
    pub doubled_ms: f64,
}

impl ScalingReport {
    pub fn ratio(&self) -> f64 {
        self.doubled_ms / self.base_ms
    }
}

pub fn filtering_scaling(
    params: &KpnParams,
    size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<ScalingReport> {
    check_reps(repetitions)?;
    let mut medians = [0.0; 2];
    for (slot, s) in medians.iter_mut().zip([size, 2 * size]) {
        let image = test_image(params, s, s, seed);
        let kernels = kpn_forward(params, &image)?;
        let t = time_runs(repetitions, || {
            black_box(filter_all(params, &image, &kernels)?);
            Ok(())
        })?;
        *slot = StageTiming::from_samples(STAGE_FILTERING, t).median_ms;
    }
    Ok(ScalingReport {
        size,
        base_ms: medians[0],
        doubled_ms: medians[1],
    })
}
