use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Adversarial point-cloud toolkit: synthetic data, three training regimes,
/// FGSM attacks, evaluation tables and t-SNE embeddings.
#[derive(Debug, Parser)]
#[command(name = "pointshield", version)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Master seed; every random stream derives from it [default: 0]
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key=value file (or a previous run's manifest.json) supplying defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads; 1 gives bit-stable output [default: 1]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of XYZ files
    GenData(DataFlags),
    /// Train a model under one regime
    Train(TrainFlags),
    /// Write adversarial copies of a dataset split
    Attack(AttackFlags),
    /// Accuracy, top-K and confidence tables for one or more models
    Eval(EvalFlags),
    /// t-SNE embedding of latent vectors as CSV and SVG
    Embed(EmbedFlags),
    /// Full comparison of all regimes over several seeds
    Report(ReportFlags),
}

#[derive(Debug, Args, Default)]
pub struct DataFlags {
    /// Number of classes (at most 16) [default: 8]
    #[arg(long)]
    pub classes: Option<usize>,
    /// Clouds per class [default: 150]
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Points per cloud [default: 512]
    #[arg(long)]
    pub points: Option<usize>,
    /// Gaussian jitter standard deviation [default: 0.02]
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Per-cloud relative spread of shape proportions [default: 0.3]
    #[arg(long)]
    pub variation: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct SplitFlags {
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Fraction of each class used for training [default: 0.8]
    #[arg(long)]
    pub split_ratio: Option<f64>,
}

#[derive(Debug, Args, Default)]
pub struct AttackOpts {
    /// Attack budget [default: 0.1]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// sign or grad [default: sign]
    #[arg(long)]
    pub attack_mode: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct OptimFlags {
    /// Number of epochs [default: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Mini-batch size [default: 16]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Adam first-moment decay [default: 0.9]
    #[arg(long)]
    pub beta1: Option<f64>,
    /// Adam second-moment decay [default: 0.999]
    #[arg(long)]
    pub beta2: Option<f64>,
    /// Adam denominator epsilon [default: 1e-8]
    #[arg(long)]
    pub adam_eps: Option<f64>,
    /// Learning-rate decay factor [default: 0.5]
    #[arg(long)]
    pub decay_gamma: Option<f64>,
    /// Epochs between decays [default: 20]
    #[arg(long)]
    pub decay_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainFlags {
    #[command(flatten)]
    pub split: SplitFlags,
    /// simple, adversarial or defense [default: simple]
    #[arg(long)]
    pub regime: Option<String>,
    #[command(flatten)]
    pub optim: OptimFlags,
    #[command(flatten)]
    pub attack: AttackOpts,
    /// Also write a checkpoint every k epochs (0 disables) [default: 0]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AttackFlags {
    #[command(flatten)]
    pub split: SplitFlags,
    /// Checkpoint of the model to attack
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub attack: AttackOpts,
    /// Which clouds to attack: test, train or all [default: test]
    #[arg(long)]
    pub set: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalFlags {
    #[command(flatten)]
    pub split: SplitFlags,
    /// Model to evaluate as NAME=PATH or PATH; repeatable
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[command(flatten)]
    pub attack: AttackOpts,
    /// Use this directory as the adversarial set instead of attacking
    /// each model
    #[arg(long)]
    pub adversarial: Option<PathBuf>,
    /// Which clouds to evaluate: test, train or all [default: test]
    #[arg(long)]
    pub set: Option<String>,
}

#[derive(Debug, Args)]
pub struct EmbedFlags {
    #[command(flatten)]
    pub split: SplitFlags,
    /// Checkpoint whose latent space is embedded
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Attack the clouds with this budget before embedding (0 embeds the
    /// clean clouds) [default: 0]
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// sign or grad [default: sign]
    #[arg(long)]
    pub attack_mode: Option<String>,
    /// Which clouds to embed: test, train or all [default: test]
    #[arg(long)]
    pub set: Option<String>,
    /// Embed at most this many clouds [default: 300]
    #[arg(long)]
    pub samples: Option<usize>,
    /// t-SNE perplexity [default: 30]
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE iterations [default: 1000]
    #[arg(long)]
    pub iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportFlags {
    #[command(flatten)]
    pub data: DataFlags,
    /// Fraction of each class used for training [default: 0.8]
    #[arg(long)]
    pub split_ratio: Option<f64>,
    #[command(flatten)]
    pub optim: OptimFlags,
    /// Comma-separated seeds, one full run each [default: 1,2,3]
    #[arg(long)]
    pub seeds: Option<String>,
    /// Comma-separated attack budgets [default: 0.1,0.2]
    #[arg(long)]
    pub epsilons: Option<String>,
    /// sign or grad [default: sign]
    #[arg(long)]
    pub attack_mode: Option<String>,
    /// Adversarial test latents embedded per model [default: 300]
    #[arg(long)]
    pub samples: Option<usize>,
    /// t-SNE perplexity [default: 30]
    #[arg(long)]
    pub perplexity: Option<f64>,
    /// t-SNE iterations [default: 1000]
    #[arg(long)]
    pub iterations: Option<usize>,
}
