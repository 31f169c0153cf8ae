//! `spheretrain` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure, 3 I/O or parse error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spheretrain::experiment::{ExperimentConfig, GateMode};
use spheretrain::task::TaskKind;
use spheretrain::Error;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_IO: u8 = 3;

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "SPHERETRAIN_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "spheretrain",
    version,
    about = "Sphere-constrained training experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one toy model and write its trace, loss curve, checkpoints and manifest.
    Train(TrainArgs),
    /// Train every point of a grid and report the best learning rate per group.
    Sweep(SweepArgs),
    /// Check a dynamics trace against the predicted update bands.
    Report(ReportArgs),
    /// Average saved checkpoints with power-law weights.
    EmaCombine(EmaArgs),
    /// Cluster embeddings with mini-batch k-means.
    Cluster(ClusterArgs),
    /// Write the rotary-embedding axes of one model layer as CSV.
    RopeDump(RopeArgs),
    /// Track hidden activation RMS across widths during training.
    Coordcheck(CoordArgs),
}

/// Experiment settings: a flat JSON file overridden by individual flags.
#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// Flat JSON experiment configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub base_lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub head_dim: Option<usize>,
    #[arg(long, value_parser = parse_gate)]
    pub gate: Option<GateMode>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn parse_gate(s: &str) -> Result<GateMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown gate mode `{s}` (inv_sqrt_depth, constant, disabled)"))
}

impl ConfigArgs {
    pub fn resolve(&self) -> spheretrain::Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                ExperimentConfig::from_json(&text)?
            }
            None => ExperimentConfig::default(),
        };
        macro_rules! over {
            ($($field:ident),*) => {
                $(if let Some(v) = &self.$field { cfg.$field = v.clone(); })*
            };
        }
        over!(
            task, width, depth, steps, batch, base_lr, seed, output_dir, head_dim, gate, log_every
        );
        if let Some(n) = self.checkpoint_every {
            cfg.checkpoint_every = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// JSON grid with keys base_lrs, widths, batches, steps, seeds.
    #[arg(long)]
    pub grid: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub widths: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub batches: Vec<usize>,
    #[arg(long = "steps-grid", value_delimiter = ',')]
    pub steps_grid: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Run grid points concurrently.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Dynamics trace CSV.
    pub trace: PathBuf,
    /// Run manifest providing per-parameter references and the schedule.
    /// Defaults to `run.json` beside the trace; without a manifest the
    /// per-parameter median update RMS is the reference.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub lower_factor: Option<f64>,
    #[arg(long)]
    pub upper_factor: Option<f64>,
    /// Report JSON destination; defaults to `report.json` beside the trace.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EmaArgs {
    /// Run directory whose periodic checkpoints are averaged.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
    /// Individual checkpoint directories.
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    #[arg(long, default_value_t = spheretrain::ema::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Candidate exponents scored by validation loss (needs --run).
    #[arg(long, value_delimiter = ',', requires = "run")]
    pub alphas: Vec<f64>,
    /// Destination directory for the averaged checkpoint and `ema.json`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct ClusterArgs {
    /// Embeddings as a DMAT matrix, one row per point.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Mini-batch iterations; defaults to three epochs.
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Use every available core for distance computations.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct RopeArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CoordArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long, value_delimiter = ',', default_values_t = [32, 256])]
    pub widths: Vec<usize>,
    #[arg(long = "check-steps", default_value_t = 50)]
    pub check_steps: usize,
    /// CSV destination; defaults to `coordcheck.csv` in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn configure_threads(parallel: bool) -> Result<(), String> {
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => Some(
            v.parse::<usize>()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{v}`"))?,
        ),
        Err(_) => None,
    };
    let available = std::thread::available_parallelism().map_or(1, |n| n.get());
    let wanted = if parallel { available } else { 1 };
    let threads = cap.map_or(wanted, |c| wanted.min(c));
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| e.to_string())
}

fn exit_code(err: &Error) -> u8 {
    if err.is_io() {
        EXIT_IO
    } else if err.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_USAGE
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let parallel = match &cli.command {
        Command::Sweep(a) => a.parallel,
        Command::Cluster(a) => a.parallel,
        _ => false,
    };
    if let Err(msg) = configure_threads(parallel) {
        eprintln!("error: {msg}");
        return ExitCode::from(EXIT_USAGE);
    }
    let result = match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
        Command::EmaCombine(a) => commands::ema_combine(a),
        Command::Cluster(a) => commands::cluster(a),
        Command::RopeDump(a) => commands::rope_dump(a),
        Command::Coordcheck(a) => commands::coordcheck(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
