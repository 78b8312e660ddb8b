//! `pnsr`: the depth super-resolution pipeline as a command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric
//! failure (the NaN guard). Every command validates its arguments before
//! touching the filesystem, and identical inputs plus identical seeds
//! produce byte-identical outputs.

mod commands;
mod manifest;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use pnsr_core::net::{HeadMode, InputMode};
use pnsr_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pnsr",
    version,
    about = "Depth super-resolution in a reversible coordinate-image domain",
    after_help = "Set PNSR_LOG={error|warn|info|debug} to control diagnostics on stderr."
)]
struct Cli {
    /// Cap the worker thread count; results are bit-identical for any value
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset and write its manifest
    Synth(SynthArgs),
    /// Degrade a depth map: bicubic downsample plus min-pooled mask
    MakeLr(MakeLrArgs),
    /// Encode a depth map into a normalized coordinate image
    Encode(EncodeArgs),
    /// Decode a coordinate image back to a 16-bit depth map
    DecodeDepth(DecodeDepthArgs),
    /// Decode a coordinate image into an ASCII point cloud
    DecodeCloud(DecodeCloudArgs),
    /// Train the super-resolution network on a synthesized dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint or the bicubic baseline, emitting JSON lines
    Eval(EvalArgs),
    /// Time the upsampling paths and report the parameter count
    Bench(BenchArgs),
    /// Run the {xyz,z} x {pncc,depth} ablation grid
    Ablate(AblateArgs),
}

/// Upscale factors mirror the evaluation grid; anything else is rejected.
fn parse_scale(s: &str) -> Result<usize, String> {
    match s {
        "4" => Ok(4),
        "8" => Ok(8),
        "16" => Ok(16),
        other => Err(format!(
            "scale must be 4, 8, or 16 (the supported evaluation grid, see README), got {other}"
        )),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum HeadArg {
    /// Predict all three coordinate channels
    Xyz,
    /// Predict depth only; X and Y are rebuilt through the camera
    Z,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InputArg {
    /// Feed all three coordinate channels
    Pncc,
    /// Feed the normalized depth plane alone
    Depth,
}

impl From<HeadArg> for HeadMode {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Xyz => HeadMode::Xyz,
            HeadArg::Z => HeadMode::Z,
        }
    }
}

impl From<InputArg> for InputMode {
    fn from(i: InputArg) -> Self {
        match i {
            InputArg::Pncc => InputMode::Pncc,
            InputArg::Depth => InputMode::Depth,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of scenes to generate
    #[arg(long)]
    scenes: usize,
    /// Upscale factor between the degraded input and the target
    #[arg(long, value_parser = parse_scale, default_value = "4")]
    scale: usize,
    /// Master seed; fixes every scene, dropout pattern, and camera
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Full-resolution image width in pixels
    #[arg(long, default_value_t = 96)]
    width: usize,
    /// Full-resolution image height in pixels
    #[arg(long, default_value_t = 96)]
    height: usize,
    /// Fraction of pixels removed by blob dropout before degradation
    #[arg(long, default_value_t = 0.05)]
    dropout: f64,
    /// Pre-normalization scale in meters
    #[arg(long, default_value_t = 10.0)]
    s: f64,
    /// Output dataset directory (created if missing)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakeLrArgs {
    /// Full-resolution 16-bit depth graymap to degrade
    #[arg(long)]
    depth: PathBuf,
    /// Intrinsics JSON matching the depth map
    #[arg(long)]
    intrinsics: PathBuf,
    /// Downsampling factor
    #[arg(long, value_parser = parse_scale, default_value = "4")]
    scale: usize,
    /// Meters per depth count in the graymaps
    #[arg(long, default_value_t = 1e-4)]
    unit_scale: f64,
    /// Output directory for lr_depth.pgm and lr_intrinsics.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    /// 16-bit depth graymap to encode
    #[arg(long)]
    depth: PathBuf,
    /// Intrinsics JSON matching the depth map
    #[arg(long)]
    intrinsics: PathBuf,
    /// Meters per depth count in the graymap
    #[arg(long, default_value_t = 1e-4)]
    unit_scale: f64,
    /// Pre-normalization scale in meters
    #[arg(long, default_value_t = 10.0)]
    s: f64,
    /// Output coordinate image (.ppm; a .ppm.json sidecar is written too)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeDepthArgs {
    /// Coordinate image to decode (.ppm with its .ppm.json sidecar)
    #[arg(long = "in")]
    input: PathBuf,
    /// Meters per depth count in the output graymap
    #[arg(long, default_value_t = 1e-4)]
    unit_scale: f64,
    /// Output 16-bit depth graymap
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecodeCloudArgs {
    /// Coordinate image to decode (.ppm with its .ppm.json sidecar)
    #[arg(long = "in")]
    input: PathBuf,
    /// Output ASCII point cloud (.ply)
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    data: PathBuf,
    /// Which channels the network predicts
    #[arg(long, value_enum, default_value_t = HeadArg::Z)]
    head: HeadArg,
    /// What the network consumes
    #[arg(long, value_enum, default_value_t = InputArg::Pncc)]
    input: InputArg,
    /// Training epochs
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Minibatch size in patches
    #[arg(long, default_value_t = 8)]
    batch: usize,
    /// Patch side length in input pixels (clamped to the image)
    #[arg(long, default_value_t = 64)]
    patch: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Charbonnier smoothing epsilon
    #[arg(long, default_value_t = 1e-3)]
    eps: f64,
    /// Feature channels in the hidden conv layers
    #[arg(long, default_value_t = 32)]
    channels: usize,
    /// Total conv layers, in/out adapters included
    #[arg(long, default_value_t = 6)]
    layers: usize,
    /// Seed for weight init, shuffling, and patch sampling
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for model.pnsr and loss.csv
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct EvalSource {
    /// Trained checkpoint to evaluate
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Evaluate a reference instead of a checkpoint (choices: bicubic)
    #[arg(long, value_parser = ["bicubic"])]
    baseline: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    source: EvalSource,
    /// Measure per-frame wall-clock time (off by default so reports are
    /// byte-reproducible; timing covers encode, inference, and decode)
    #[arg(long)]
    timing: bool,
    /// Also write the JSON-lines report to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to time alongside the bicubic reference
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Untimed runs before measuring
    #[arg(long, default_value_t = 2)]
    warmup: usize,
    /// Timed repetitions per frame
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Cap the number of frames benchmarked
    #[arg(long, default_value_t = 4)]
    frames: usize,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory holding manifest.json
    #[arg(long)]
    data: PathBuf,
    /// Training epochs per grid cell
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    /// Feature channels per grid cell (small by default: the grid is four
    /// trainings)
    #[arg(long, default_value_t = 8)]
    channels: usize,
    /// Total conv layers per grid cell
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Seed shared by all four configurations
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for ablate.csv
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PNSR_LOG", "warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version are successes, not usage errors.
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }

    let result = match cli.cmd {
        Cmd::Synth(a) => commands::synth(a),
        Cmd::MakeLr(a) => commands::make_lr(a),
        Cmd::Encode(a) => commands::encode(a),
        Cmd::DecodeDepth(a) => commands::decode_depth(a),
        Cmd::DecodeCloud(a) => commands::decode_cloud(a),
        Cmd::Train(a) => commands::train(a),
        Cmd::Eval(a) => commands::eval(a),
        Cmd::Bench(a) => commands::bench(a),
        Cmd::Ablate(a) => commands::ablate(a),
    };

    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numeric(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
