use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "edrain",
    version,
    about = "Single-image deraining with per-pixel dilated kernels",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write metrics.csv plus checkpoints into --out.
    Train(Box<TrainArgs>),
    /// Derain one PNG.
    Derain(DerainArgs),
    /// Report PSNR/SSIM over a rainy/clean dataset.
    Eval(EvalArgs),
    /// Write RainMix rain maps (and composites when --image is given).
    RainmixPreview(PreviewArgs),
    /// Time the derain stages.
    Bench(BenchArgs),
    /// Write procedural rain streak maps.
    GenStreaks(GenStreaksArgs),
    /// Write a synthetic rainy/clean dataset under <OUT_DIR>/rainy and <OUT_DIR>/clean.
    GenPairs(GenPairsArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    V1,
    V2,
    V3,
    V4,
}

/// Key=value file whose keys are long flag names; flags given on the command line win.
#[derive(Debug, Args)]
pub struct ConfigArg {
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Directory holding rainy/ and clean/ subdirectories.
    #[arg(long, value_name = "DIR", conflicts_with_all = ["rainy_dir", "clean_dir"])]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR", requires = "clean_dir")]
    pub rainy_dir: Option<PathBuf>,
    #[arg(long, value_name = "DIR", requires = "rainy_dir")]
    pub clean_dir: Option<PathBuf>,
}

impl DataArgs {
    pub fn dirs(&self) -> Option<(PathBuf, PathBuf)> {
        match (&self.data, &self.rainy_dir, &self.clean_dir) {
            (Some(d), _, _) => Some((d.join("rainy"), d.join("clean"))),
            (None, Some(r), Some(c)) => Some((r.clone(), c.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    /// Train on this many generated 64x64 pairs instead of a dataset on disk.
    #[arg(long, value_name = "N", conflicts_with_all = ["data", "rainy_dir", "clean_dir"])]
    pub synthetic: Option<usize>,
    /// Rain streak PNGs for RainMix; procedural streaks are generated when omitted.
    #[arg(long, value_name = "DIR")]
    pub streaks: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Continue from a checkpoint written by an earlier run with the same flags.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Ablation preset; the other flags override its fields.
    #[arg(long, value_enum, default_value = "v4")]
    pub variant: VariantArg,
    #[arg(long)]
    pub iterations: Option<u64>,
    #[arg(long)]
    pub epochs: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_enum)]
    pub ssim_loss: Option<Switch>,
    #[arg(long, value_enum)]
    pub rainmix: Option<Switch>,
    /// Comma-separated dilation factors, e.g. 1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    pub dilations: Option<Vec<usize>>,
    #[arg(long)]
    pub kernel_size: Option<usize>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub base_channels: Option<usize>,
    #[arg(long, value_enum)]
    pub normalize_kernels: Option<Switch>,
    #[arg(long)]
    pub crop_size: Option<usize>,
    #[arg(long)]
    pub checkpoint_interval: Option<u64>,
    #[arg(long)]
    pub val_interval: Option<u64>,
    /// Print a progress line every N iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    pub log_every: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Trained checkpoint; an untrained identity-start network is used when omitted.
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DerainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    pub input: PathBuf,
    pub output: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Score the rainy inputs directly instead of the network output.
    #[arg(long)]
    pub inputs_only: bool,
    /// Write the CSV report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    pub out_dir: PathBuf,
    /// Rain streak PNGs; procedural streaks are generated when omitted.
    #[arg(long, value_name = "DIR")]
    pub streaks: Option<PathBuf>,
    /// Clean image to composite each mixed rain map onto.
    #[arg(long, value_name = "PNG")]
    pub image: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Side of generated streak maps.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 20)]
    pub repetitions: usize,
    /// Also time each dilation alone and the filtering stage at twice the size.
    #[arg(long)]
    pub extended: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenStreaksArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenPairsArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Parses a key=value config file into `--key=value` tokens.
/// Blank lines and lines starting with `#` are skipped; keys may use `_` or `-`.
pub fn config_tokens(path: &Path, text: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                no + 1
            )
        })?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() || key == "config" {
            return Err(format!(
                "{}:{}: invalid key {key:?}",
                path.display(),
                no + 1
            ));
        }
        out.push(format!("--{key}={}", value.trim()));
    }
    Ok(out)
}

/// Splices the `--config` file's flags in front of the subcommand's own
/// arguments so that explicit flags, parsed later, take precedence.
pub fn expand_config(argv: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(1) {
        if a == "--" {
            break;
        }
        if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
            break;
        }
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
            break;
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let Some(sub) = argv.iter().skip(1).position(|a| !a.starts_with('-')) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let tokens = config_tokens(&path, &text)?;
    let at = sub + 2;
    let mut out = argv[..at].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}
