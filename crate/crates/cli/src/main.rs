//! `dreamnet` command line: data generation, training, evaluation and the
//! CSV reports.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "dreamnet", version, about = "Multimodal dream narrative classifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Debug, Args, Clone, Default)]
pub struct Common {
    /// Plain-text key=value configuration file. Flags win over the file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with EEG sidecars.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        eeg_fraction: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-LM pretraining of the text encoder on the training split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Multilabel fine-tuning with early stopping.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Pretrained checkpoint whose encoder initializes the model.
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
    /// Score a checkpoint (or a predictions file) and the rule baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "predictions")]
        ckpt: Option<PathBuf>,
        /// JSONL of {id, emotions, themes} probabilities to score instead
        /// of running a model.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Which split to score: train, val, test or all.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        report_dir: PathBuf,
    },
    /// Train and score the four ablation configurations over seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        report_dir: PathBuf,
    },
    /// k-fold cross-validation of one configuration.
    Kfold {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        init_ckpt: Option<PathBuf>,
        #[arg(long)]
        report_dir: PathBuf,
    },
    /// Theme-emotion Pearson grid with permutation p-values.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Model whose predicted emotion probabilities are correlated.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Use gold emotion labels even when a checkpoint is given.
        #[arg(long)]
        gold: bool,
        #[arg(long)]
        n_perm: Option<usize>,
        #[arg(long)]
        report_dir: PathBuf,
    },
    /// Finite-difference check of the full multimodal graph.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        d_model: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Coordinates checked per tensor; 0 checks all of them.
        #[arg(long, default_value_t = 40)]
        coords: usize,
        #[arg(long, default_value_t = 1e-4)]
        threshold: f64,
        #[arg(long)]
        report_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, n, eeg_fraction, out } => commands::gen_data(&common, n, eeg_fraction, &out),
        Command::Pretrain { common, data, ckpt_out, report_dir } => commands::pretrain(&common, &data, &ckpt_out, report_dir),
        Command::Finetune { common, data, ckpt_out, init_ckpt, report_dir } => {
            commands::finetune(&common, &data, &ckpt_out, init_ckpt.as_deref(), report_dir)
        }
        Command::Eval { common, data, ckpt, predictions, split, report_dir } => {
            commands::eval(&common, &data, ckpt.as_deref(), predictions.as_deref(), &split, &report_dir)
        }
        Command::Ablate { common, data, init_ckpt, seeds, report_dir } => {
            commands::ablate(&common, &data, init_ckpt.as_deref(), seeds, &report_dir)
        }
        Command::Kfold { common, data, k, init_ckpt, report_dir } => commands::kfold(&common, &data, k, init_ckpt.as_deref(), &report_dir),
        Command::Correlate { common, data, ckpt, gold, n_perm, report_dir } => {
            commands::correlate(&common, &data, ckpt.as_deref(), gold, n_perm, &report_dir)
        }
        Command::GradCheck { common, d_model, eps, coords, threshold, report_dir } => {
            commands::grad_check(&common, d_model, eps, coords, threshold, report_dir.as_deref())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
