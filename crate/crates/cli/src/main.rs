//! `odfield`: phantom generation, training, baselines, inference, posterior
//! sampling, metrics and benchmarks for continuous ODF fields.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Profile;

#[derive(Parser, Debug)]
#[command(name = "odfield", version, about = "Continuous ODF fields from diffusion MRI")]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct DwiArgs {
    /// 4-D diffusion-weighted NIfTI image.
    #[arg(long)]
    pub dwi: Option<PathBuf>,
    /// Gradient directions (3 rows or one row per volume).
    #[arg(long)]
    pub bvec: Option<PathBuf>,
    /// b-values, one per volume.
    #[arg(long)]
    pub bval: Option<PathBuf>,
    /// Brain mask; a signal-threshold mask is used when absent.
    #[arg(long)]
    pub mask: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic crossing-fiber phantom.
    Phantom {
        /// Phantom description (TOML); the built-in 32³ crossing phantom when absent.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the seed of the phantom description.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the SNR of the phantom description (`inf` for noiseless).
        #[arg(long)]
        snr: Option<f64>,
        /// Override the cube side of the built-in phantom.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Fit a coefficient field to a diffusion volume.
    Train {
        /// Run configuration (TOML).
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        data: DwiArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        profile: Option<Profile>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lambda_c: Option<f64>,
        /// Pick λ_c by held-out error on a central slice before training.
        #[arg(long)]
        select_lambda: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Save a checkpoint every this many epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Voxel-wise penalized spherical-harmonic least squares.
    FitShls {
        #[command(flatten)]
        data: DwiArgs,
        /// Laplace-Beltrami penalty weight.
        #[arg(long, default_value_t = odfield::data::DEFAULT_LAMBDA_SH)]
        lambda: f64,
        /// Output coefficient volume (.nii or .nii.gz).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained field on a grid or at listed coordinates.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output: a NIfTI coefficient volume for grids, CSV for coordinates.
        #[arg(long)]
        out: PathBuf,
        /// Grid refinement factor relative to the training grid.
        #[arg(long, default_value_t = 1.0)]
        upsample: f64,
        /// Grid extent as `X,Y,Z`, overriding the training grid.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        dims: Option<Vec<usize>>,
        /// Text file of normalized coordinates in [0,1], one `x y z` per line.
        #[arg(long)]
        coords: Option<PathBuf>,
        #[arg(long, default_value_t = 4096)]
        chunk: usize,
        #[arg(long)]
        force: bool,
    },
    /// Posterior samples of the output layer and a GFA uncertainty map.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DwiArgs,
        /// Number of posterior draws.
        #[arg(short = 'n', long, default_value_t = odfield::posterior::DEFAULT_SAMPLES)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run configuration supplying the prior; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write the GFA of every draw as one 4-D volume.
        #[arg(long)]
        save_samples: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// FSIM of GFA or DTI maps between two coefficient volumes.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricKind::Gfa)]
        kind: MetricKind,
        /// Gradient table for synthesizing the tensor fit (kind dti).
        #[arg(long)]
        bvec: Option<PathBuf>,
        #[arg(long)]
        bval: Option<PathBuf>,
        /// Also render central slices as PNG.
        #[arg(long)]
        png: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Throughput, latency and posterior-cost benchmarks.
    Bench {
        #[arg(long, value_enum, default_value_t = BenchScenario::All)]
        scenario: BenchScenario,
        /// Timed runs per measurement (at least 5).
        #[arg(long, default_value_t = 5)]
        runs: usize,
        /// Side of the phantom used for training epochs.
        #[arg(long, default_value_t = 8)]
        phantom_size: usize,
        /// Side of the inference grid.
        #[arg(long, default_value_t = 64)]
        grid: usize,
        /// Points timed for slow profiles before linear extrapolation.
        #[arg(long, default_value_t = 2048)]
        max_points: usize,
        /// Worker threads; the kernels are single-threaded, so only 1 is accepted.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Report file (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    Gfa,
    Dti,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchScenario {
    Train,
    Infer,
    Posterior,
    All,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
