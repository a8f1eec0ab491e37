//! `tsal`: dataset construction, training, prediction, evaluation and
//! projection for text-driven 360° video saliency.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tsal", version, about = "Text-driven saliency detection for 360° video")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Config file of `section.key = value` lines
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set model.heads=4`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub attention: Option<AttentionArg>,
    #[arg(long, global = true, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long = "sim-est", global = true, value_enum)]
    pub sim_est: Option<Switch>,
    #[arg(long, global = true, value_enum)]
    pub skips: Option<Switch>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum AttentionArg {
    Vstca,
    Vsta,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum HeadArg {
    Sigmoid,
    Relu,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build a triplet store from videos with fixations and captions
    DatasetBuild {
        /// Root holding one directory per video
        #[arg(long)]
        videos: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split the videos of a store into disjoint folds
    Kfold {
        /// Triplet store (its manifest lists the videos)
        #[arg(long)]
        store: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Output fold file
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a triplet store
    Train {
        #[arg(long)]
        store: PathBuf,
        /// Output directory for checkpoint, config and log
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        folds: Option<PathBuf>,
        /// Hold out this fold; train on the others
        #[arg(long = "fold-index", requires = "folds")]
        fold_index: Option<usize>,
        /// Continue from an existing checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Predict the saliency map of the last frame of a window
    Predict {
        /// Directory of ERP frames (the last F are used) or a `.lst` file
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted maps against ground truth
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Group samples by the folds of their video (first path component)
        #[arg(long)]
        folds: Option<PathBuf>,
        #[arg(long = "fold-index", requires = "folds")]
        fold_index: Option<usize>,
        /// Directory for metrics.csv and samples.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the tangent images of one ERP frame and their reassembly
    Project {
        /// ERP frame (PNG)
        #[arg(long)]
        frames: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("TSAL_THREADS") {
        let n: usize = v.parse().map_err(|_| anyhow::anyhow!("TSAL_THREADS={v:?} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = init_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
