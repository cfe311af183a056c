use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::SynthKind;

#[derive(Debug, Parser)]
#[command(name = "lanam", version, about = "Laplace-approximated neural additive models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Name of the target column.
    #[arg(long)]
    pub target: Option<String>,
    /// regression or classification.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON run configuration to start from; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Trained model JSON.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lr_hyper: Option<f64>,
    /// Epochs between evidence refreshes.
    #[arg(long)]
    pub hyper_every: Option<usize>,
    /// Hyperparameter steps per refresh.
    #[arg(long)]
    pub hyper_steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Refreshes without evidence improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Hidden width of the per-feature networks.
    #[arg(long)]
    pub hidden: Option<usize>,
    /// dense or kfac.
    #[arg(long)]
    pub curvature: Option<String>,
    /// Run single-threaded.
    #[arg(long)]
    pub sequential: bool,
    /// Keep the observation noise fixed at its initial value.
    #[arg(long)]
    pub fixed_noise: bool,
    /// Try learning rates 0.1, 0.01 and 0.001 and keep the best final evidence.
    #[arg(long)]
    pub lr_sweep: bool,
    /// Also write the fitted posterior as posterior.json.
    #[arg(long)]
    pub export_posterior: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write model.json plus training_log.csv.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Per-feature curves and per-sample contributions of a trained model.
    Explain {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Score and rank all feature pairs.
    Interactions {
        #[command(flatten)]
        common: CommonArgs,
        /// Number of top pairs to report as selected.
        #[arg(long)]
        k: Option<usize>,
        /// mi, gain or mi-blockwise.
        #[arg(long)]
        scorer: Option<String>,
    },
    /// Add joint networks for selected pairs and retrain.
    Finetune {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Select the top k pairs by --scorer.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        scorer: Option<String>,
        /// Explicit pairs, e.g. `1:2,0:3`.
        #[arg(long)]
        pairs: Option<String>,
        #[arg(long)]
        joint_hidden: Option<usize>,
    },
    /// Cross-validated metrics, or metrics of a saved model on held-out data.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        folds: Option<usize>,
        /// Evaluate the constant (training mean or base rate) predictor.
        #[arg(long)]
        baseline: bool,
        /// Plug-in class probabilities instead of the probit approximation.
        #[arg(long)]
        plug_in: bool,
        /// Training data for the saved model's posterior.
        #[arg(long)]
        fit_data: Option<PathBuf>,
    },
    /// Write a synthetic dataset and its ground truth.
    Synth {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        kind: Option<SynthKind>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Explain { .. } => "explain",
            Command::Interactions { .. } => "interactions",
            Command::Finetune { .. } => "finetune",
            Command::Eval { .. } => "eval",
            Command::Synth { .. } => "synth",
        }
    }

    pub fn common(&self) -> &CommonArgs {
        match self {
            Command::Train { common, .. }
            | Command::Explain { common }
            | Command::Interactions { common, .. }
            | Command::Finetune { common, .. }
            | Command::Eval { common, .. }
            | Command::Synth { common, .. } => common,
        }
    }

    pub fn train_args(&self) -> Option<&TrainArgs> {
        match self {
            Command::Train { train, .. } | Command::Finetune { train, .. } | Command::Eval { train, .. } => Some(train),
            _ => None,
        }
    }
}
