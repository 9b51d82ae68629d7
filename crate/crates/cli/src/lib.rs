//! The `dota` command-line tool.
//!
//! Exit codes: 0 success, 1 gamma pass rate below `--pass-threshold`,
//! 2 usage or configuration error, 3 data error, 4 numeric failure.

mod bench;
mod commands;
mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use bench::{bench, format_bench, BenchRow};
pub use commands::{run, BelowThreshold};
pub use manifest::{manifest_beside, RunManifest, MANIFEST_FILE};

pub const EXIT_THRESHOLD: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "dota",
    version,
    about = "Transformer proton dose prediction toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of phantoms and oracle doses
    Gen(GenArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Predict a dose grid for one geometry and energy
    Predict(PredictArgs),
    /// Compare a predicted dose with a reference (gamma and relative error)
    Eval(EvalArgs),
    /// Train a grid of model configurations and rank them by test MSE
    Sweep(SweepArgs),
    /// Measure inference latency
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Number of geometries (each carries --energies doses)
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// water, slabs, blobs or mixed
    #[arg(long, default_value = "mixed")]
    pub phantom: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Doses per geometry
    #[arg(long, default_value_t = 4)]
    pub energies: usize,
    /// Pseudo Monte Carlo noise as a fraction of max dose
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// L,H,W
    #[arg(long, default_value = "64,16,8")]
    pub dims: String,
    /// Voxel spacing in mm along L,H,W
    #[arg(long, default_value = "3,1,1")]
    pub spacing: String,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// key = value model config (defaults to the desk preset)
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// key = value training config
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from <out>/last.dota
    #[arg(long)]
    pub resume: bool,
    /// Overrides `epochs` from the training config
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `seed` from the training config
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub geometry: PathBuf,
    /// Beam energy in MeV
    #[arg(long)]
    pub energy: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Dose difference in percent of the reference maximum
    #[arg(long, default_value_t = 1.0)]
    pub dd: f64,
    /// Distance to agreement in mm
    #[arg(long, default_value_t = 3.0)]
    pub dta: f64,
    /// Zero predicted dose below 0.01% of its maximum before evaluating
    #[arg(long)]
    pub masked: bool,
    /// Normalise the dose difference by the local reference dose
    #[arg(long)]
    pub local: bool,
    /// Exit with status 1 when the pass rate (%) falls below this
    #[arg(long)]
    pub pass_threshold: Option<f64>,
    /// Write the gamma grid as a DGRD file
    #[arg(long)]
    pub gamma_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset scored with each run's best checkpoint
    #[arg(long)]
    pub test: PathBuf,
    /// e.g. "blocks=1,2,4;filters=8,10,16;heads=8,16"; "paper" for that grid
    #[arg(long)]
    pub grid_spec: String,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long)]
    pub train_config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Batch sizes to time
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    pub batch: Vec<usize>,
    /// Timed runs per batch size (at least 30)
    #[arg(long, default_value_t = 30)]
    pub runs: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Geometry to run on (defaults to a water phantom)
    #[arg(long)]
    pub geometry: Option<PathBuf>,
    #[arg(long, default_value_t = 100.0)]
    pub energy: f64,
}

/// Maps an error to the documented exit status.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use dota_core::Error;
    if err.downcast_ref::<BelowThreshold>().is_some() {
        return EXIT_THRESHOLD;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => EXIT_USAGE,
                Error::Io { .. } | Error::Format { .. } | Error::Data(_) => EXIT_DATA,
                Error::Numeric(_) | Error::Tensor(_) => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_DATA;
        }
    }
    EXIT_USAGE
}

/// Caps rayon's pool at `DOTA_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DOTA_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("DOTA_THREADS must be a positive integer, got '{}'", v))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}
