//! `cwflow`: simulate light-field data, train conditional wavelet flows,
//! reconstruct volumes and flag unfamiliar samples.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cwflow_core::Error;

use crate::config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "cwflow", version, about = "Conditional wavelet flow reconstruction for light-field microscopy")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, env = "CWFLOW_CONFIG")]
    config: Option<PathBuf>,
    /// Master seed for generators, initialization and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "CWFLOW_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Phantom,
    Beads,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    OnlyNew,
    AppendAll,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom or bead sequence and its sensor images.
    Simulate {
        #[arg(long, value_enum, default_value_t = Kind::Phantom)]
        kind: Kind,
        #[arg(long)]
        frames: Option<usize>,
        /// Bead density preset, 0 (densest) to 3.
        #[arg(long)]
        density_preset: Option<usize>,
        /// Constant background inside the phantom's outer ellipsoid.
        #[arg(long)]
        background: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replace a dataset's volumes with Richardson-Lucy estimates.
    Deconvolve {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on a dataset's training frames.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Training report (JSON); defaults to `<out>.report.json`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        train_stride: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        epochs_per_level: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f32>,
    },
    /// Reconstruct volumes from a dataset's images.
    Reconstruct {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        temperature: Option<f64>,
        /// Also report PSNR against the dataset volumes at T = 0, 0.25, 0.5, 1.
        #[arg(long)]
        sweep: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score samples by per-level negative log-likelihood.
    Ood {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset to score, optionally labeled: `path`, `path:in` or `path:out`.
        #[arg(long = "dataset", required = true)]
        datasets: Vec<String>,
        /// Threshold report from an earlier run; otherwise one is selected
        /// when both labels are present.
        #[arg(long)]
        threshold: Option<PathBuf>,
        /// Estimate volumes by Richardson-Lucy instead of using the stored ones.
        #[arg(long)]
        deconvolve: bool,
        #[arg(long)]
        level: Option<usize>,
        /// Report JSON to write (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        save_threshold: Option<PathBuf>,
    },
    /// Adapt a model to a new specimen.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset of the new specimen.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::OnlyNew)]
        mode: Mode,
        /// Original training dataset, required by `append-all`.
        #[arg(long)]
        existing: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Compare reconstructed volumes against reference volumes.
    Metrics {
        /// Dataset holding the reference volumes.
        #[arg(long)]
        gt: PathBuf,
        /// Dataset holding the reconstructed volumes.
        #[arg(long)]
        recon: PathBuf,
        /// Neurons used for trace correlation.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the model's analytic gradients against finite differences on a
    /// small random instance.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        points: usize,
        #[arg(long, default_value_t = 5e-4)]
        eps: f32,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
}

/// Exit codes: 0 success, 2 usage, 3 data or format, 4 numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 2,
        e if e.is_numerical() => 4,
        _ => 3,
    }
}

fn resolve(g: &GlobalArgs) -> cwflow_core::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.resolve()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = resolve(&cli.global).and_then(|cfg| {
        log::info!("resolved config: {}", serde_json::to_string(&cfg)?);
        commands::run(cli.command, cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
