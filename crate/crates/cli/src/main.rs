//! Command-line front end: generate scenes, train, evaluate and sweep.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vidphys::loss::LossMode;

#[derive(Parser, Debug)]
#[command(name = "vidphys", version, about = "Estimate physical parameters from video without labels")]
struct Cli {
    /// Log per-epoch progress.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command. Flags override the config file.
#[derive(Args, Debug, Default, Clone)]
pub struct Common {
    /// TOML experiment file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Synthetic scenario (intensity, motion, scale, two-body) or real-video
    /// preset (pendulum, torricelli, sliding-block, led, free-fall-scale).
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sampling period for generated scenes and physics step for training.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, value_parser = config::parse_loss_mode)]
    pub loss_mode: Option<LossMode>,
    /// Prior mean and standard deviation, e.g. `0,1`.
    #[arg(long, value_name = "MU,STD", value_parser = config::parse_pair, allow_hyphen_values = true)]
    pub prior: Option<(f64, f64)>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Uniform range for physics-parameter initialization, e.g. `-10,10`.
    #[arg(long, value_name = "LO,HI", value_parser = config::parse_pair, allow_hyphen_values = true)]
    pub init_range: Option<(f64, f64)>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Frames per generated sample.
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Sampling periods for the dt ablation, e.g. `0.2,0.4,0.8`.
    #[arg(long, value_name = "DT,...", value_delimiter = ',')]
    pub dt_list: Option<Vec<f64>>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset to disk.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train on a dataset folder, or on a freshly generated scene.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Align and extrapolate a trained model's latent against ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Steps rolled out past the training window.
        #[arg(long, default_value_t = 20)]
        horizon: usize,
        /// Samples to evaluate.
        #[arg(long, default_value_t = 20)]
        samples: usize,
    },
    /// Train several runs from random physics initializations.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Retrain at several sampling periods.
    DtAblation {
        #[command(flatten)]
        common: Common,
    },
    /// Roll the learned physics forward from one sample's encoded frames.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 20)]
        horizon: usize,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("VIDPHYS_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| anyhow::anyhow!("VIDPHYS_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Generate { common } => commands::generate(&common),
        Command::Train {
            common,
            dataset,
            resume,
        } => commands::train(&common, dataset.as_deref(), resume.as_deref()),
        Command::Eval {
            common,
            checkpoint,
            dataset,
            horizon,
            samples,
        } => commands::eval(&common, &checkpoint, dataset.as_deref(), horizon, samples),
        Command::Sweep { common, dataset } => commands::sweep(&common, dataset.as_deref()),
        Command::DtAblation { common } => commands::dt_ablation(&common),
        Command::Rollout {
            common,
            checkpoint,
            dataset,
            sample,
            horizon,
        } => commands::rollout(&common, &checkpoint, dataset.as_deref(), sample, horizon),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
