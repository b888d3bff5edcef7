//! Outer training loop: sample, augment, derain, loss, backward, Adam.

use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{invalid_arg, Error, Result};
use crate::filtering::DilationFactors;
use crate::image_io::save_image;
use crate::kpn::{derain, derain_backward, derain_taped, KpnConfig, KpnParams};
use crate::loss::{combined_loss, combined_loss_backward, psnr, LossConfig, LossValue};
use crate::pipeline::checkpoint::Checkpoint;
use crate::pipeline::dataset::Dataset;
use crate::rainmix::{composite_rainy, rain_mix, RainMixConfig, RainStreakSet};
use crate::rng::{PinnedRng, RngState};
use crate::tensor::{AdamConfig, AdamState, Tensor};

pub const METRICS_HEADER: &str = "iteration,loss,l1,ssim,val_psnr";

/// Ablation variants. Each differs from the previous one in exactly one switch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// Single scale (`l = 1`), L1 only, no RainMix.
    V1,
    /// Dilations `{1, 2, 3, 4}`.
    V2,
    /// Adds the SSIM term.
    V3,
    /// Adds RainMix augmentation.
    V4,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::V1, Variant::V2, Variant::V3, Variant::V4];

    pub fn name(self) -> &'static str {
        match self {
            Variant::V1 => "v1",
            Variant::V2 => "v2",
            Variant::V3 => "v3",
            Variant::V4 => "v4",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| invalid_arg!("unknown variant {s:?}; expected v1, v2, v3 or v4"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    /// Overrides `iterations` with `epochs * ceil(len / batch)` when set.
    pub epochs: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub ssim_enabled: bool,
    pub rainmix_enabled: bool,
    pub dilations: DilationFactors,
    pub kernel_width: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub normalize_kernels: bool,
    pub seed: u64,
    pub crop_size: usize,
    /// Zero disables periodic checkpoints.
    pub checkpoint_interval: u64,
    /// Zero disables validation.
    pub val_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::variant(Variant::V4)
    }
}

impl TrainConfig {
    pub fn variant(v: Variant) -> Self {
        let mut c = Self {
            iterations: 2000,
            epochs: None,
            batch_size: 4,
            learning_rate: 1e-3,
            lambda: 0.2,
            ssim_enabled: true,
            rainmix_enabled: true,
            dilations: DilationFactors::default(),
            kernel_width: 5,
            levels: 3,
            base_channels: 32,
            normalize_kernels: false,
            seed: 0,
            crop_size: 64,
            checkpoint_interval: 500,
            val_interval: 100,
        };
        if v == Variant::V1 {
            c.dilations = DilationFactors::new(vec![1]).expect("valid");
        }
        if matches!(v, Variant::V1 | Variant::V2) {
            c.ssim_enabled = false;
        }
        if v != Variant::V4 {
            c.rainmix_enabled = false;
        }
        c
    }

    pub fn kpn_config(&self, input_channels: usize) -> KpnConfig {
        KpnConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            kernel_width: self.kernel_width,
            dilations: self.dilations.clone(),
            input_channels,
            normalize_kernels: self.normalize_kernels,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ssim_enabled: self.ssim_enabled,
            ..LossConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(invalid_arg!("batch size must be >= 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid_arg!("learning rate must be positive"));
        }
        if !self.lambda.is_finite() {
            return Err(invalid_arg!("lambda must be finite"));
        }
        self.kpn_config(3).validate()?;
        let m = 1usize << (self.levels - 1);
        if self.crop_size == 0 || !self.crop_size.is_multiple_of(m) {
            return Err(invalid_arg!(
                "crop size {} must be a non-zero multiple of {m}",
                self.crop_size
            ));
        }
        Ok(())
    }

    /// Iteration budget for a dataset of `len` pairs.
    pub fn total_iterations(&self, len: usize) -> u64 {
        match self.epochs {
            Some(e) => e * (len.max(1) as u64).div_ceil(self.batch_size as u64),
            None => self.iterations,
        }
    }

    /// `key=value` pairs in the same vocabulary as the CLI flags.
    pub fn key_values(&self) -> Vec<(&'static str, String)> {
        let on = |b: bool| if b { "on" } else { "off" }.to_string();
        let dil = self
            .dilations
            .as_slice()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("iterations", self.iterations.to_string()),
            (
                "epochs",
                self.epochs.map_or("none".into(), |e| e.to_string()),
            ),
            ("batch-size", self.batch_size.to_string()),
            ("lr", self.learning_rate.to_string()),
            ("lambda", self.lambda.to_string()),
            ("ssim-loss", on(self.ssim_enabled)),
            ("rainmix", on(self.rainmix_enabled)),
            ("dilations", dil),
            ("kernel-size", self.kernel_width.to_string()),
            ("levels", self.levels.to_string()),
            ("base-channels", self.base_channels.to_string()),
            ("normalize-kernels", on(self.normalize_kernels)),
            ("seed", self.seed.to_string()),
            ("crop-size", self.crop_size.to_string()),
            ("checkpoint-interval", self.checkpoint_interval.to_string()),
            ("val-interval", self.val_interval.to_string()),
        ]
    }

    /// `# key=value` lines that open every metrics log.
    pub fn header(&self) -> String {
        self.key_values()
            .into_iter()
            .map(|(k, v)| format!("# {k}={v}\n"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: u64,
    pub loss: LossValue,
    /// Mean PSNR over the validation crops, on iterations that ran validation.
    pub val_psnr: Option<f64>,
}

impl fmt::Display for IterationRecord {
    /// One CSV row matching [`METRICS_HEADER`]; disabled fields are empty.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9}"));
        write!(
            f,
            "{},{:.9},{:.9},{},{}",
            self.iteration,
            self.loss.total,
            self.loss.l1,
            opt(self.loss.ssim),
            opt(self.val_psnr)
        )
    }
}

/// Training state: parameters, optimizer, master RNG and iteration counter.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    streaks: Option<&'a RainStreakSet>,
    rainmix: RainMixConfig,
    loss: LossConfig,
    params: KpnParams,
    adam: AdamState,
    rng: PinnedRng,
    iteration: u64,
    validation: Vec<(Tensor, Tensor)>,
    dump_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        config: TrainConfig,
        dataset: &'a Dataset,
        streaks: Option<&'a RainStreakSet>,
    ) -> Result<Self> {
        config.validate()?;
        let channels = check_dataset(&config, dataset, streaks)?;
        let kpn = config.kpn_config(channels);
        let params = KpnParams::init(&kpn, config.seed)?;
        let adam = AdamState::new(config.adam_config(), params.tensors());
        // Stream 1 keeps the data RNG independent of the init RNG for the same seed.
        let mut rng = PinnedRng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Self::assemble(config, dataset, streaks, params, adam, rng, 0)
    }

    /// Continues from a checkpoint; the result matches an uninterrupted run.
    pub fn resume(
        config: TrainConfig,
        dataset: &'a Dataset,
        streaks: Option<&'a RainStreakSet>,
        checkpoint: Checkpoint,
    ) -> Result<Self> {
        config.validate()?;
        let channels = check_dataset(&config, dataset, streaks)?;
        if checkpoint.params.config != config.kpn_config(channels) {
            return Err(invalid_arg!(
                "checkpoint network {:?} does not match the training configuration",
                checkpoint.params.config
            ));
        }
        let mut adam = checkpoint.adam;
        adam.config = config.adam_config();
        let rng = checkpoint.rng.restore();
        Self::assemble(
            config,
            dataset,
            streaks,
            checkpoint.params,
            adam,
            rng,
            checkpoint.iteration,
        )
    }

    fn assemble(
        config: TrainConfig,
        dataset: &'a Dataset,
        streaks: Option<&'a RainStreakSet>,
        params: KpnParams,
        adam: AdamState,
        rng: PinnedRng,
        iteration: u64,
    ) -> Result<Self> {
        let validation = validation_crops(dataset, config.crop_size)?;
        Ok(Self {
            loss: config.loss_config(),
            config,
            dataset,
            streaks,
            rainmix: RainMixConfig::default(),
            params,
            adam,
            rng,
            iteration,
            validation,
            dump_dir: None,
        })
    }

    /// Where the offending batch is written if the loss becomes non-finite.
    pub fn set_dump_dir(&mut self, dir: impl Into<PathBuf>) {
        self.dump_dir = Some(dir.into());
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn params(&self) -> &KpnParams {
        &self.params
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: RngState::capture(&self.rng),
            iteration: self.iteration,
        }
    }

    /// Mean PSNR of the current network on the fixed validation crops.
    pub fn validation_psnr(&self) -> Result<f64> {
        let mut total = 0.0;
        for (rainy, clean) in &self.validation {
            let out = derain(&self.params, rainy)?.clamp(0.0, 1.0);
            total += psnr(&out, clean, 1.0)?;
        }
        Ok(total / self.validation.len() as f64)
    }

    /// One training sample from its own RNG: RainMix draw, pair, crop, source image.
    fn sample(&self, seed: u64) -> Result<(Tensor, Tensor)> {
        let mut rng = PinnedRng::seed_from_u64(seed);
        let rain = match (self.config.rainmix_enabled, self.streaks) {
            (true, Some(streaks)) => Some(rain_mix(streaks, &mut rng, &self.rainmix)?),
            _ => None,
        };
        let pair = &self.dataset.pairs[rng.random_range(0..self.dataset.len())];
        let (_, _, h, w) = pair.clean.dims4()?;
        let s = self.config.crop_size;
        let top = rng.random_range(0..=h - s);
        let left = rng.random_range(0..=w - s);
        let rainy = pair.rainy.crop(top, left, s, s)?;
        let clean = pair.clean.crop(top, left, s, s)?;
        let input = match rain {
            Some(r) => {
                let base = if rng.random_bool(0.5) { &rainy } else { &clean };
                composite_rainy(base, &r)?
            }
            None => rainy,
        };
        Ok((input, clean))
    }

    /// Runs one iteration and returns its record; the loss is measured before the update.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let seeds: Vec<u64> = (0..self.config.batch_size)
            .map(|_| self.rng.next_u64())
            .collect();
        let samples = seeds
            .par_iter()
            .map(|&s| self.sample(s))
            .collect::<Result<Vec<_>>>()?;
        let (inputs, targets): (Vec<Tensor>, Vec<Tensor>) = samples.into_iter().unzip();
        let input = Tensor::stack_batch(&inputs)?;
        let target = Tensor::stack_batch(&targets)?;

        let val_psnr = match self.config.val_interval {
            0 => None,
            n if self.iteration.is_multiple_of(n) => Some(self.validation_psnr()?),
            _ => None,
        };

        let (out, tape) = derain_taped(&self.params, &input)?;
        let loss = combined_loss(&out, &target, &self.loss)?;
        if !loss.total.is_finite() {
            return Err(self.non_finite(&input, &target, &out, format!("loss {:?}", loss)));
        }
        let grad_out = combined_loss_backward(&out, &target, &self.loss)?;
        let grads = derain_backward(&self.params, &tape, &grad_out)?;
        if !grads.is_finite() {
            return Err(self.non_finite(
                &input,
                &target,
                &out,
                "non-finite parameter gradient".into(),
            ));
        }
        self.adam.step(self.params.tensors_mut(), &grads.tensors)?;

        let record = IterationRecord {
            iteration: self.iteration,
            loss,
            val_psnr,
        };
        self.iteration += 1;
        Ok(record)
    }

    fn non_finite(&self, input: &Tensor, target: &Tensor, output: &Tensor, what: String) -> Error {
        let stats = |t: &Tensor| {
            let finite = t.data().iter().filter(|v| v.is_finite()).count();
            let (lo, hi) = t
                .data()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                    (a.min(v), b.max(v))
                });
            format!("finite {finite}/{}, min {lo}, max {hi}", t.len())
        };
        let params_finite = self.params.tensors().iter().all(|t| t.is_finite());
        let mut detail = format!(
            "{what}; input [{}]; target [{}]; output [{}]; parameters finite: {params_finite}",
            stats(input),
            stats(target),
            stats(output)
        );
        if let Some(dir) = &self.dump_dir {
            match dump_batch(dir, self.iteration, input, target, &detail) {
                Ok(path) => detail.push_str(&format!("; batch written to {}", path.display())),
                Err(e) => detail.push_str(&format!("; batch dump failed: {e}")),
            }
        }
        Error::NonFinite {
            iteration: self.iteration,
            detail,
        }
    }
}

fn check_dataset(
    config: &TrainConfig,
    dataset: &Dataset,
    streaks: Option<&RainStreakSet>,
) -> Result<usize> {
    let first = dataset
        .pairs
        .first()
        .ok_or_else(|| Error::InvalidState("training dataset is empty".into()))?;
    let (_, channels, _, _) = first.clean.dims4()?;
    for p in &dataset.pairs {
        let (_, c, h, w) = p.clean.dims4()?;
        if c != channels {
            return Err(invalid_arg!(
                "pair {} has {c} channels, expected {channels}",
                p.name
            ));
        }
        if h < config.crop_size || w < config.crop_size {
            return Err(invalid_arg!(
                "pair {} ({h}x{w}) is smaller than the {} crop",
                p.name,
                config.crop_size
            ));
        }
    }
    if config.rainmix_enabled && streaks.is_none_or(|s| s.is_empty()) {
        return Err(Error::InvalidState(
            "RainMix is enabled but no rain streaks were supplied".into(),
        ));
    }
    Ok(channels)
}

/// Centre crop of every pair (at most 8).
fn validation_crops(dataset: &Dataset, size: usize) -> Result<Vec<(Tensor, Tensor)>> {
    dataset
        .pairs
        .iter()
        .take(8)
        .map(|p| {
            let (_, _, h, w) = p.clean.dims4()?;
            let (top, left) = ((h - size) / 2, (w - size) / 2);
            Ok((
                p.rainy.crop(top, left, size, size)?,
                p.clean.crop(top, left, size, size)?,
            ))
        })
        .collect()
}

fn dump_batch(
    dir: &Path,
    iteration: u64,
    input: &Tensor,
    target: &Tensor,
    detail: &str,
) -> Result<PathBuf> {
    let dir = dir.join(format!("nonfinite_{iteration:06}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (n, _, _, _) = input.dims4()?;
    for i in 0..n {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let (_, c, h, w) = t.dims4()?;
            let plane = c * h * w;
            let data = t.data()[i * plane..(i + 1) * plane]
                .iter()
                .map(|v| if v.is_finite() { *v } else { 0.0 })
                .collect();
            Tensor::new(vec![1, c, h, w], data)
        };
        save_image(dir.join(format!("input_{i}.png")), &pick(input)?)?;
        save_image(dir.join(format!("target_{i}.png")), &pick(target)?)?;
    }
    let report = dir.join("diagnostic.txt");
    std::fs::write(&report, format!("iteration {iteration}\n{detail}\n"))
        .map_err(|e| Error::io(&report, e))?;
    Ok(dir)
}

/// Appends CSV rows to `metrics.csv`, writing the config header on creation.
pub struct MetricsLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut log = Self {
            out: BufWriter::new(file),
            path,
        };
        let text = format!("{}{METRICS_HEADER}\n", config.header());
        log.write(&text)?;
        Ok(log)
    }

    pub fn append(path: impl AsRef<Path>, config: &TrainConfig) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if !path.exists() {
            return Self::create(path, config);
        }
        let file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path,
        })
    }

    pub fn record(&mut self, record: &IterationRecord) -> Result<()> {
        self.write(&format!("{record}\n"))
    }

    fn write(&mut self, text: &str) -> Result<()> {
        self.out
            .write_all(text.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub records: Vec<IterationRecord>,
}

/// Where `run` writes its metrics log and checkpoints.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.csv")
    }

    pub fn checkpoint(&self, iteration: u64) -> PathBuf {
        self.dir.join(format!("checkpoint_{iteration:06}.edrn"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.edrn")
    }
}

impl Trainer<'_> {
    /// Steps until `until` iterations have run, logging and checkpointing into `artifacts`.
    pub fn run(
        &mut self,
        until: u64,
        artifacts: Option<&Artifacts>,
    ) -> Result<Vec<IterationRecord>> {
        let mut log = match artifacts {
            Some(a) => {
                std::fs::create_dir_all(&a.dir).map_err(|e| Error::io(&a.dir, e))?;
                self.set_dump_dir(a.dir.clone());
                Some(if self.iteration == 0 {
                    MetricsLog::create(a.metrics(), &self.config)?
                } else {
                    MetricsLog::append(a.metrics(), &self.config)?
                })
            }
            None => None,
        };
        let mut records = Vec::new();
        while self.iteration < until {
            let record = self.step()?;
            if let Some(log) = log.as_mut() {
                log.record(&record)?;
            }
            records.push(record);
            let interval = self.config.checkpoint_interval;
            if let Some(a) = artifacts {
                if interval > 0 && self.iteration.is_multiple_of(interval) {
                    self.checkpoint().save(a.checkpoint(self.iteration))?;
                }
            }
        }
        if let Some(a) = artifacts {
            self.checkpoint().save(a.final_checkpoint())?;
        }
        Ok(records)
    }
}

/// Trains from scratch for the configured budget.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    streaks: Option<&RainStreakSet>,
    artifacts: Option<&Artifacts>,
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(config.clone(), dataset, streaks)?;
    let records = trainer.run(config.total_iterations(dataset.len()), artifacts)?;
    Ok(TrainOutput {
        checkpoint: trainer.checkpoint(),
        records,
    })
}
