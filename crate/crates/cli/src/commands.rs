use std::path::Path;

use derain_core::image_io::{load_image, save_image};
use derain_core::pipeline::dataset::{synthetic_dataset, DatasetIndex, Split};
use derain_core::pipeline::eval::{derain_image, evaluate, evaluate_inputs};
use derain_core::pipeline::latency::{
    benchmark_latency, filtering_per_dilation, filtering_scaling, relative_spread,
};
use derain_core::pipeline::train::{Artifacts, Trainer};
use derain_core::rainmix::{
    composite_rainy, rain_mix, seeded_streak_set, DEFAULT_STREAK_COUNT, DEFAULT_STREAK_SIZE,
};
use derain_core::{
    Checkpoint, Dataset, DilationFactors, Error, KpnConfig, KpnParams, PinnedRng, RainMixConfig,
    RainStreakSet, Result, TrainConfig, Variant,
};
use rand::SeedableRng;

use crate::args::{
    BenchArgs, DataArgs, DerainArgs, EvalArgs, GenPairsArgs, GenStreaksArgs, ModelArgs,
    PreviewArgs, TrainArgs, VariantArg,
};

/// Side of generated streak maps when no streak directory is given.
const SYNTHETIC_PAIR_SIZE: usize = 64;

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn load_dataset(data: &DataArgs, split: Split) -> Result<Dataset> {
    let (rainy, clean) = data.dirs().ok_or_else(|| {
        Error::InvalidArgument("give --data or both --rainy-dir and --clean-dir".into())
    })?;
    DatasetIndex::discover(rainy, clean, split)?.load()
}

fn streak_set(dir: Option<&Path>, seed: u64) -> Result<RainStreakSet> {
    match dir {
        Some(d) => RainStreakSet::load_dir(d),
        None => seeded_streak_set(DEFAULT_STREAK_COUNT, DEFAULT_STREAK_SIZE, seed),
    }
}

fn load_model(model: &ModelArgs, channels: usize, seed: u64) -> Result<KpnParams> {
    match &model.checkpoint {
        Some(path) => Ok(Checkpoint::load(path)?.params),
        None => KpnParams::identity(
            &KpnConfig {
                input_channels: channels,
                ..KpnConfig::default()
            },
            seed,
        ),
    }
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let variant = match a.variant {
        VariantArg::V1 => Variant::V1,
        VariantArg::V2 => Variant::V2,
        VariantArg::V3 => Variant::V3,
        VariantArg::V4 => Variant::V4,
    };
    let mut c = TrainConfig::variant(variant);
    c.seed = a.seed;
    c.epochs = a.epochs;
    if let Some(v) = a.iterations {
        c.iterations = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.lambda {
        c.lambda = v;
    }
    if let Some(v) = a.ssim_loss {
        c.ssim_enabled = v.into();
    }
    if let Some(v) = a.rainmix {
        c.rainmix_enabled = v.into();
    }
    if let Some(v) = &a.dilations {
        c.dilations = DilationFactors::new(v.clone())?;
    }
    if let Some(v) = a.kernel_size {
        c.kernel_width = v;
    }
    if let Some(v) = a.levels {
        c.levels = v;
    }
    if let Some(v) = a.base_channels {
        c.base_channels = v;
    }
    if let Some(v) = a.normalize_kernels {
        c.normalize_kernels = v.into();
    }
    if let Some(v) = a.crop_size {
        c.crop_size = v;
    }
    if let Some(v) = a.checkpoint_interval {
        c.checkpoint_interval = v;
    }
    if let Some(v) = a.val_interval {
        c.val_interval = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = train_config(a)?;
    let dataset = match a.synthetic {
        Some(n) => synthetic_dataset(n, SYNTHETIC_PAIR_SIZE.max(config.crop_size), a.seed)?,
        None => load_dataset(&a.data, Split::Train)?,
    };
    let streaks = if config.rainmix_enabled {
        Some(streak_set(a.streaks.as_deref(), a.seed)?)
    } else {
        None
    };
    let total = config.total_iterations(dataset.len());
    print!("{}", config.header());
    let mut trainer = match &a.resume {
        Some(path) => Trainer::resume(config, &dataset, streaks.as_ref(), Checkpoint::load(path)?)?,
        None => Trainer::new(config, &dataset, streaks.as_ref())?,
    };
    let artifacts = Artifacts { dir: a.out.clone() };
    while trainer.iteration() < total {
        let until = match a.log_every {
            0 => total,
            n => ((trainer.iteration() / n + 1) * n).min(total),
        };
        let records = trainer.run(until, Some(&artifacts))?;
        if let Some(r) = records.last() {
            let val = r
                .val_psnr
                .map_or(String::new(), |p| format!(", val PSNR {p:.3} dB"));
            println!(
                "iteration {}/{total}: loss {:.6}{val}",
                r.iteration + 1,
                r.loss.total
            );
        }
    }
    println!("wrote {}", artifacts.final_checkpoint().display());
    Ok(())
}

pub fn derain(a: &DerainArgs) -> Result<()> {
    let image = load_image(&a.input)?;
    let (_, channels, _, _) = image.dims4()?;
    let params = load_model(&a.model, channels, a.seed)?;
    let out = derain_image(&params, &image)?;
    save_image(&a.output, &out)
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    let dataset = load_dataset(&a.data, Split::Val)?;
    let report = if a.inputs_only {
        evaluate_inputs(&dataset)?
    } else {
        let (_, channels, _, _) = dataset.pairs[0].rainy.dims4()?;
        evaluate(&load_model(&a.model, channels, a.seed)?, &dataset)?
    };
    match &a.csv {
        Some(path) => {
            std::fs::write(path, report.to_csv()).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }
        None => print!("{}", report.to_csv()),
    }
    eprintln!("{}", report.summary());
    Ok(())
}

pub fn rainmix_preview(a: &PreviewArgs) -> Result<()> {
    let streaks = match &a.streaks {
        Some(d) => RainStreakSet::load_dir(d)?,
        None => seeded_streak_set(DEFAULT_STREAK_COUNT, a.size, a.seed)?,
    };
    let image = a.image.as_ref().map(load_image).transpose()?;
    create_dir(&a.out_dir)?;
    let mut rng = PinnedRng::seed_from_u64(a.seed);
    let config = RainMixConfig::default();
    for i in 0..a.count {
        let rain = rain_mix(&streaks, &mut rng, &config)?;
        save_image(a.out_dir.join(format!("rain_{i:03}.png")), &rain.to_image())?;
        if let Some(img) = &image {
            save_image(
                a.out_dir.join(format!("composite_{i:03}.png")),
                &composite_rainy(img, &rain)?,
            )?;
        }
    }
    println!("wrote {} previews to {}", a.count, a.out_dir.display());
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let params = load_model(&a.model, 3, a.seed)?;
    let report = benchmark_latency(&params, a.size, a.size, a.repetitions, a.seed)?;
    println!("{report}");
    if a.extended {
        let per = filtering_per_dilation(&params, a.size, &[1, 2, 3, 4], a.repetitions, a.seed)?;
        for (l, ms) in &per {
            println!("  dilation {l}: median {ms:.3} ms");
        }
        println!(
            "  spread across dilations: {:.1}%",
            100.0 * relative_spread(&per)
        );
        let s = filtering_scaling(&params, a.size, a.repetitions, a.seed)?;
        println!(
            "  filtering {}px {:.3} ms -> {}px {:.3} ms, ratio {:.2}",
            s.size,
            s.base_ms,
            2 * s.size,
            s.doubled_ms,
            s.ratio()
        );
    }
    Ok(())
}

pub fn gen_streaks(a: &GenStreaksArgs) -> Result<()> {
    // the same set `train` uses for this seed when no streak directory is given
    let set = seeded_streak_set(a.count, a.size, a.seed)?;
    create_dir(&a.out_dir)?;
    for (name, map) in set.iter() {
        save_image(a.out_dir.join(format!("{name}.png")), &map.to_image())?;
    }
    println!("wrote {} streak maps to {}", set.len(), a.out_dir.display());
    Ok(())
}

pub fn gen_pairs(a: &GenPairsArgs) -> Result<()> {
    let ds = synthetic_dataset(a.count, a.size, a.seed)?;
    ds.write_dirs(&a.out_dir)?;
    println!("wrote {} pairs to {}", ds.len(), a.out_dir.display());
    Ok(())
}
