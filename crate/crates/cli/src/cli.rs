use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use eegfm::TaskKind;

#[derive(Debug, Parser)]
#[command(name = "eegfm", version, about = "EEG foundation model experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset of session directories.
    GenData(GenData),
    /// Self-supervised pretraining from a config file.
    Pretrain(Configured),
    /// Multi-task finetuning from a config file.
    Finetune(Configured),
    /// Score a finetuned checkpoint on a dataset.
    Eval(Eval),
    /// Print the attention masks of one sampled mask plan.
    InspectMasks(InspectMasks),
    /// Compare analytic and finite-difference gradients.
    GradCheck(GradCheck),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Number of synthetic classes, starting at `--first-class`.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub first_class: usize,
    /// Total sessions, assigned to classes round-robin.
    #[arg(long, default_value_t = 60)]
    pub sessions: usize,
    #[arg(long, default_value_t = 30)]
    pub duration: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 10.0)]
    pub snr_db: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct Configured {
    /// `key = value` file, or a `config-manifest.json` from an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `key=value`, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Overrides the `run_dir` key.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    /// Task to score; every task of the checkpoint when omitted.
    #[arg(long)]
    pub task: Option<String>,
    #[arg(long, default_value_t = 6)]
    pub window: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectMasks {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long = "T")]
    pub time_steps: usize,
    #[arg(long = "C")]
    pub channels: usize,
    /// Valid (non-padded) channels; defaults to `C`.
    #[arg(long)]
    pub valid: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradCheck {
    /// Checks a saved model instead of a fresh tiny one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub n_params: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TaskKind::MaeTp)]
    pub kind: TaskKind,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    #[arg(long = "T", default_value_t = 3)]
    pub time_steps: usize,
    #[arg(long = "C", default_value_t = 3)]
    pub channels: usize,
    /// Test fixture: perturbs the analytic gradient of this parameter.
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}
