use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use compdiff_core::SystemId;

use crate::preset::PresetName;

#[derive(Debug, Parser)]
#[command(name = "compdiff", version, about = "Compositional diffusion sampling of coupled PDE fields")]
pub struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Print the fully resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the PDE system on random initial conditions and save a dataset.
    GenerateData(GenerateArgs),
    /// Train a denoiser on decoupled data or the operator baseline on coupled data.
    Train(TrainArgs),
    /// Compose per-field denoisers into coupled trajectories.
    Compose(ComposeArgs),
    /// Score predictions against a coupled test set and append to a CSV report.
    Evaluate(EvaluateArgs),
    /// Render heatmaps of one sample from each dataset.
    Plot(PlotArgs),
    /// Compose and evaluate over a list of Picard relaxation weights.
    SweepLambda(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SystemArg {
    Rd,
    Burgers,
}

impl From<SystemArg> for SystemId {
    fn from(s: SystemArg) -> Self {
        match s {
            SystemArg::Rd => SystemId::ReactionDiffusion,
            SystemArg::Burgers => SystemId::ModifiedBurgers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum KindArg {
    DecoupledU,
    DecoupledV,
    Coupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    DdpmEps,
    DdpmV,
    Fno,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionArg {
    /// Attention at the two deepest stages only.
    Deep,
    /// Attention after every stage.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ComposeEps,
    ComposeV,
    Fno,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::ComposeEps => "compose-eps",
            Method::ComposeV => "compose-v",
            Method::Fno => "fno",
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub system: SystemArg,
    #[arg(long, value_enum)]
    pub kind: KindArg,
    /// Number of samples (default: the preset's).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = PresetName::Paper)]
    pub preset: PresetName,
    /// The test split draws from a seed range disjoint from training.
    #[arg(long, value_enum, default_value_t = Split::Train)]
    pub split: Split,
    #[arg(long)]
    pub nx: Option<usize>,
    #[arg(long)]
    pub nt: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = PresetName::Paper)]
    pub preset: PresetName,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub ema_decay: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the preset's denoiser width.
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, value_enum, default_value_t = AttentionArg::Deep)]
    pub attention: AttentionArg,
    /// Feed the physical time coordinate as an extra denoiser input.
    #[arg(long)]
    pub time_channel: bool,
    /// Write an EMA checkpoint every this many steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Loss log CSV (default: next to the checkpoint).
    #[arg(long)]
    pub loss_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ComposeOpts {
    /// Denoiser checkpoints, one per field, in any order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub models: Vec<PathBuf>,
    /// Coupled dataset supplying the initial conditions.
    #[arg(long)]
    pub ics: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub picard: usize,
    /// Diffusion steps; must match the checkpoints' schedule.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Keep the iterate at its noise level and relax only the clean estimates.
    #[arg(long)]
    pub renoise_picard: bool,
    /// Condition on the true fields of the IC dataset instead of running estimates.
    #[arg(long)]
    pub teacher_forced: bool,
    /// Use only the first N initial conditions.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct ComposeArgs {
    #[command(flatten)]
    pub opts: ComposeOpts,
    #[arg(long, default_value_t = 0.2)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum)]
    pub method: Method,
    /// Coupled ground-truth dataset.
    #[arg(long)]
    pub test: PathBuf,
    /// CSV report; rows are appended.
    #[arg(long)]
    pub report: PathBuf,
    /// Composed dataset (compose methods).
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Operator checkpoint (fno).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub n: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub fields: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub opts: ComposeOpts,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5,1.0")]
    pub lambdas: Vec<f64>,
    #[arg(long)]
    pub report: PathBuf,
}
