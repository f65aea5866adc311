//! Command-line surface. Every flag is optional here; required
//! settings are enforced after merging with the config file, so a
//! resolved config alone can drive any command.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "relsteer",
    version,
    about = "Relation-classifier steering pipeline: synthetic attention data, training, leakage probes, latent steering, and spatial evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic attention-stack dataset
    GenData(GenDataArgs),
    /// Train the relation classifier on a dataset file
    Train(TrainArgs),
    /// Run the mismatched-prompt leakage probe against a checkpoint
    ProbeLeakage(ProbeLeakageArgs),
    /// Steer a latent toward the relations in a prompt
    Steer(SteerArgs),
    /// Score a directory of steering outputs with a spatial metric
    Eval(EvalArgs),
    /// Train {dual, pos-only} × λ grid and tabulate leakage
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Config file with a [gen-data] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Comma-separated timestep list, e.g. 25,49
    #[arg(long)]
    pub timesteps: Option<String>,
    /// Watermark strength λ
    #[arg(long)]
    pub leak: Option<f64>,
    /// Enable dual-inversion augmentation (default)
    #[arg(long, overrides_with = "no_dual")]
    pub dual: bool,
    /// Disable dual-inversion augmentation (positives only)
    #[arg(long)]
    pub no_dual: bool,
    #[arg(long)]
    pub neutral_frac: Option<f64>,
    /// Emit only mismatched-prompt probe records
    #[arg(long)]
    pub negatives_only: bool,
    #[arg(long)]
    pub noise_max: Option<f64>,
    /// Stack shape: desk or reduced
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Config file with a [train] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset file from gen-data
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Architecture: desk or reduced
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Checkpoint output path; history lands at <out>.history.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct ProbeLeakageArgs {
    /// Config file with a [probe-leakage] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Probe dataset (gen-data --negatives-only)
    #[arg(long)]
    pub probe_data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SteerArgs {
    /// Config file with a [steer] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Prompt, e.g. "a dog to the right of a teddy bear"
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient step size; 0 traces without moving the latent
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Optimize only at the single noisiest timestep
    #[arg(long)]
    pub init_noise_only: bool,
    /// Output directory for trace.csv, final.csv, resolved.cfg
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Config file with an [eval] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory whose subdirectories are steering outputs
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Metric: geneval or t2i
    #[arg(long)]
    pub metric: Option<String>,
    /// Detector: oracle or attn
    #[arg(long)]
    pub detector: Option<String>,
    /// Stack shape for the attn detector: desk or reduced
    #[arg(long)]
    pub shape: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Config file with an [ablate] section; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scenes: Option<usize>,
    /// Comma-separated λ levels, e.g. 0,0.3,0.6
    #[arg(long)]
    pub lambdas: Option<String>,
    #[arg(long)]
    pub timesteps: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}
