mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hkp_core::dataset::{CropKind, CropStrategy};

/// Hand keypoint localization: inference, evaluation, benchmarking.
#[derive(Debug, Parser)]
#[command(name = "hkp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Localize keypoints for every annotated image and write one JSON line per image.
    Infer(InferArgs),
    /// Score predictions against annotations (AUC, EPE, PCK curve).
    Evaluate(EvaluateArgs),
    /// Time forward passes at 112 and 224 input and print the parameter/FLOP audit.
    Bench(BenchArgs),
    /// Print the architecture table and parameter/FLOP audit.
    Inspect(InspectArgs),
    /// Write cropped inputs and 22-plane training targets to an HKWF archive.
    MakeTargets(MakeTargetsArgs),
}

#[derive(Debug, Args)]
struct Exec {
    /// Worker threads [default: available cores].
    #[arg(long, env = "HKP_THREADS")]
    threads: Option<usize>,
    /// Single-threaded, bitwise-reproducible execution.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Decode {
    /// Confidence threshold [default: 10 / grid cells].
    #[arg(long)]
    tau: Option<f64>,
    /// Target Gaussian sigma in grid pixels.
    #[arg(long, default_value_t = hkp_core::heatmap::DEFAULT_SIGMA)]
    sigma: f64,
    /// Peaks considered by the low-confidence fallback.
    #[arg(long, default_value_t = hkp_core::heatmap::DEFAULT_FALLBACK_PEAKS)]
    peaks: usize,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// Line-delimited JSON annotations; image paths are relative to this file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 224, value_parser = parse_size)]
    size: usize,
    /// head[:F] | hand[:F] | ext[:F] | fixed
    #[arg(long, default_value = "hand:2.0", value_parser = parse_crop)]
    crop: CropKind,
    #[command(flatten)]
    decode: Decode,
    #[command(flatten)]
    exec: Exec,
    /// Also write skeleton overlays as PNGs into this directory.
    #[arg(long)]
    overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Predictions written by `hkp infer`.
    #[arg(long)]
    input: PathBuf,
    /// Ground-truth annotations, in the same order.
    #[arg(long)]
    gt: PathBuf,
    /// JSON summary path; the PCK curve goes next to it with a .csv extension.
    #[arg(long)]
    out: PathBuf,
    /// Translate each prediction so its wrist matches the ground-truth wrist.
    #[arg(long)]
    align_root: bool,
    /// Report PCKh: errors divided by the annotated head size, thresholds 0..1.
    #[arg(long)]
    normalize_head: bool,
    /// Largest pixel threshold of the PCK curve.
    #[arg(long, default_value_t = 30.0)]
    max_threshold: f64,
    #[arg(long, default_value = "hkp")]
    label: String,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Weight archive; seeded random weights when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[command(flatten)]
    exec: Exec,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, default_value_t = 224, value_parser = parse_size)]
    size: usize,
    /// Emit the architecture table as JSON.
    #[arg(long)]
    json: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MakeTargetsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 224, value_parser = parse_size)]
    size: usize,
    #[arg(long, default_value = "hand:2.0", value_parser = parse_crop)]
    crop: CropKind,
    #[arg(long, default_value_t = hkp_core::heatmap::DEFAULT_SIGMA)]
    sigma: f64,
    /// Apply random rotation/translation/scale augmentation.
    #[arg(long)]
    augment: bool,
    #[command(flatten)]
    exec: Exec,
}

fn parse_size(s: &str) -> Result<usize, String> {
    match s {
        "112" => Ok(112),
        "224" => Ok(224),
        _ => Err(format!("size must be 112 or 224, got {s}")),
    }
}

fn parse_crop(s: &str) -> Result<CropKind, String> {
    let (kind, factor) = match s.split_once(':') {
        Some((k, f)) => (k, Some(f.parse::<f64>().map_err(|e| format!("bad crop factor {f:?}: {e}"))?)),
        None => (s, None),
    };
    if let Some(f) = factor {
        if !(f > 0.0 && f.is_finite()) {
            return Err(format!("crop factor must be positive, got {f}"));
        }
    }
    match kind {
        "head" => Ok(CropKind::HeadScaled(factor.unwrap_or(1.2))),
        "hand" => Ok(CropKind::HandScaled(factor.unwrap_or(2.0))),
        "ext" => Ok(CropKind::ExternalEnlarged(factor.unwrap_or(1.25))),
        "fixed" if factor.is_none() => Ok(CropKind::FixedWindow),
        _ => Err(format!("unknown crop {s:?}; expected head[:F], hand[:F], ext[:F] or fixed")),
    }
}

fn strategy(kind: CropKind, size: usize) -> CropStrategy {
    CropStrategy {
        kind,
        target_size: size,
    }
}

/// Exit status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Bench(a) => commands::bench(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::MakeTargets(a) => commands::make_targets(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<UsageError>().is_some()
                || matches!(e.downcast_ref::<hkp_core::Error>(), Some(hkp_core::Error::Usage(_)));
            ExitCode::from(if usage { 1 } else { 2 })
        }
    }
}
