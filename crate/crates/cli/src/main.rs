//! `srnr` command-line entry point.
//!
//! Exit codes: 0 success, 2 invalid arguments or configuration, 3 I/O
//! failure, 4 processing failure. Errors go to standard error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use srnr::SrnrError;

/// Super-resolution of thick-slice volumes with a residual 3D network
/// trained against noisy high-resolution references.
#[derive(Debug, Parser)]
#[command(name = "srnr", version, propagate_version = true)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    /// Only log errors.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom or degrade an input volume into a training triplet.
    Simulate(SimulateArgs),
    /// Train a network and write a checkpoint.
    Train(TrainArgs),
    /// Super-resolve a thick-slice volume with a trained checkpoint.
    Infer(InferArgs),
    /// Print MAE, PSNR and SSIM of two volumes as a CSV row.
    Evaluate(EvaluateArgs),
    /// Run a desk-scale study and write its report directory.
    Sweep(SweepArgs),
}

/// Degradation model shared by several subcommands.
#[derive(Debug, Args, Clone)]
pub struct DegradeArgs {
    /// Thick-slice factor (fine slices averaged per thick slice).
    #[arg(long, default_value_t = 5)]
    pub factor: usize,

    /// Axis (0, 1 or 2) along which slices are thickened.
    #[arg(long, default_value_t = 2)]
    pub slice_axis: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Generate a procedural phantom instead of reading --input.
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub phantom: bool,

    /// High-resolution NIfTI volume to degrade; normalized before noise is added.
    #[arg(long)]
    pub input: Option<PathBuf>,

    /// Brain mask for --input (nonzero voxels); thresholded from the volume if absent.
    #[arg(long, requires = "input")]
    pub mask: Option<PathBuf>,

    /// Phantom dimensions as nx,ny,nz.
    #[arg(long, default_value = "64,64,60")]
    pub dims: String,

    /// Seed of the phantom and the noise.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Noise standard deviation as a multiple of the masked intensity std.
    #[arg(long, default_value_t = 0.0)]
    pub sigma_rel: f64,

    /// Noise mean.
    #[arg(long, default_value_t = 0.0)]
    pub mu: f64,

    /// Number of noisy realizations averaged into the reference.
    #[arg(long, default_value_t = 1)]
    pub k: usize,

    #[command(flatten)]
    pub degrade: DegradeArgs,

    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key=value configuration file; flags override its entries.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// High-resolution training volume (repeatable).
    #[arg(long = "hr", conflicts_with = "phantoms")]
    pub hr: Vec<PathBuf>,

    /// Mask for each --hr volume, in the same order (repeatable).
    #[arg(long = "mask", requires = "hr")]
    pub masks: Vec<PathBuf>,

    /// Train on this many generated phantoms instead of --hr volumes.
    #[arg(long)]
    pub phantoms: Option<usize>,

    /// Phantom dimensions as nx,ny,nz.
    #[arg(long)]
    pub dims: Option<String>,

    /// Seed of initialization, patch sampling, phantoms and noise.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Reference noise level (multiple of the masked intensity std).
    #[arg(long)]
    pub sigma_rel: Option<f64>,

    #[arg(long)]
    pub epochs: Option<usize>,

    #[arg(long)]
    pub learning_rate: Option<f64>,

    #[arg(long)]
    pub batch: Option<usize>,

    /// Patch size as px,py,pz.
    #[arg(long)]
    pub patch: Option<String>,

    #[arg(long)]
    pub patches_per_volume: Option<usize>,

    /// Number of convolution layers.
    #[arg(long)]
    pub depth: Option<usize>,

    /// Hidden channels per layer.
    #[arg(long)]
    pub width: Option<usize>,

    /// Arithmetic precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,

    /// Scale on the output layer's initial weights; 0 starts from a zero residual.
    #[arg(long)]
    pub final_layer_gain: Option<f64>,

    #[arg(long)]
    pub factor: Option<usize>,

    #[arg(long)]
    pub slice_axis: Option<usize>,

    /// Checkpoint path; `<path>.cfg` and `<path>.loss.csv` are written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Thick-slice NIfTI volume.
    #[arg(long)]
    pub input: PathBuf,

    /// The input is already interpolated to the fine grid.
    #[arg(long)]
    pub upsampled: bool,

    #[command(flatten)]
    pub degrade: DegradeArgs,

    /// Inference tile size as px,py,pz.
    #[arg(long, default_value = "32,32,32")]
    pub patch: String,

    /// Arithmetic precision: f32 or f64.
    #[arg(long, default_value = "f32")]
    pub precision: String,

    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Volume under test.
    #[arg(long)]
    pub a: PathBuf,

    /// Reference volume.
    #[arg(long)]
    pub b: PathBuf,

    /// Brain mask (nonzero voxels); the whole volume if absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,

    /// Row label.
    #[arg(long, default_value = "evaluate")]
    pub label: String,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Key=value configuration file; missing keys use the desk defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Study to run: noise or average.
    #[arg(long, default_value = "noise", value_parser = ["noise", "average"])]
    pub study: String,

    /// Override the master seed.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Report directory.
    #[arg(long, default_value = "report")]
    pub out_dir: PathBuf,
}

/// Failure of a subcommand, mapped to an exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(SrnrError),
}

impl From<SrnrError> for CliError {
    fn from(e: SrnrError) -> Self {
        match e {
            SrnrError::Config(_) | SrnrError::InvalidArgument(_) => CliError::Usage(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_io() => 3,
            CliError::Core(_) => 4,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SRNR_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("SRNR_THREADS must be a non-negative integer, got {value:?}")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot configure {n} threads: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (_, 0) => log::LevelFilter::Warn,
        (_, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    let result = init_threads().and_then(|()| match &cli.command {
        Command::Simulate(a) => commands::simulate(a),
        Command::Train(a) => commands::train(a),
        Command::Infer(a) => commands::infer(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Sweep(a) => commands::sweep(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
