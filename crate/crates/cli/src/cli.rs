use std::net::SocketAddr;
use std::path::PathBuf;

use cardinal_core::policy_opt::DEFAULT_BETA;
use cardinal_core::reward_fit::DEFAULT_BT_L2;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::files::{IndexingArg, KindArg};

#[derive(Debug, Parser)]
#[command(name = "cardinal", version, about = "Ordinal versus cardinal preference fine-tuning experiments")]
pub struct Cli {
    /// Treat convergence warnings as failures (exit code 4).
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a ground-truth reward and label comparisons with simulated annotators.
    Simulate(SimulateArgs),
    /// Fit a reward table from a dataset (Bradley-Terry or WTP least squares).
    FitReward(FitArgs),
    /// Tabular DPO/CDPO fine-tuning from a uniform reference policy.
    Optimize(OptimizeArgs),
    /// Show that ordinal data cannot pick the better of two models.
    DemoImpossibility(DemoArgs),
    /// Run the seeded evaluation experiments.
    Evaluate(EvaluateArgs),
    /// WTP distribution diagnostics against a fitted logistic.
    Stats(StatsArgs),
    /// Rescale each labeler's WTP to unit standard deviation.
    Normalize(NormalizeArgs),
    /// Labeler-stratified train/holdout split.
    Split(SplitArgs),
    /// Run the labeling HTTP service.
    Serve(ServeArgs),
    /// simulate, split, fit, optimize and evaluate in one go.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory [default: $CARDINAL_OUT/<command> or cardinal-out/<command>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace existing artifacts.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct InputArgs {
    /// JSONL dataset.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub kind: KindArg,
    /// Field renames, e.g. `wtp=amount,labeler_id=rater`.
    #[arg(long)]
    pub fields: Option<String>,
    #[arg(long, value_enum, default_value_t)]
    pub indexing: IndexingArg,
}

/// Overrides applied on top of a config file.
#[derive(Debug, Args, Serialize)]
pub struct ExperimentOverrides {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub prompts: Option<usize>,
    #[arg(long)]
    pub responses: Option<usize>,
    #[arg(long)]
    pub reward_sd: Option<f64>,
    /// Noise sd applied to every annotator.
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub experiment: ExperimentOverrides,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitMethod {
    Bt,
    Wtp,
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum)]
    pub method: FitMethod,
    /// Bradley-Terry ridge penalty.
    #[arg(long, default_value_t = DEFAULT_BT_L2)]
    pub l2: f64,
    #[arg(long, default_value_t = 50_000)]
    pub max_iter: usize,
    /// Normalize WTP per labeler before fitting.
    #[arg(long)]
    pub normalize: bool,
    /// Ground-truth file from `simulate`; fixes the index maps and adds a
    /// margin-error report.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Cardinal holdout for held-out margin MSE.
    #[arg(long)]
    pub holdout: Option<PathBuf>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossArg {
    Dpo,
    Cdpo,
}

impl From<LossArg> for cardinal_core::LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Dpo => Self::Dpo,
            LossArg::Cdpo => Self::Cdpo,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct OptimizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum)]
    pub loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tolerance: f64,
    /// Keep raw WTP units in the CDPO loss.
    #[arg(long)]
    pub raw_wtp: bool,
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Samples shown in the per-sample loss heatmap.
    #[arg(long, default_value_t = 60)]
    pub heatmap_samples: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct DemoArgs {
    /// `m1_a,m2_a,m1_b,m2_b`: margins of the pi1 and pi2 prompts under each reward.
    #[arg(long, default_value = "100,0.2,0.2,100")]
    pub margins: String,
    /// Number of pi2 prompts.
    #[arg(long, default_value_t = 2)]
    pub copies: usize,
    #[arg(long, value_enum, default_value_t = LossArg::Dpo)]
    pub loss: LossArg,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    /// Sample this many comparisons instead of covering every pair.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentArg {
    Selection,
    Stratified,
    Heldout,
    Tradeoff,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Experiments to run [default: all].
    #[arg(long, value_enum, value_delimiter = ',')]
    pub experiment: Vec<ExperimentArg>,
    /// Selection trials.
    #[arg(long, default_value_t = 400)]
    pub trials: usize,
    /// Held-out comparison runs.
    #[arg(long, default_value_t = 100)]
    pub runs: usize,
    /// Stratified validation tuples.
    #[arg(long, default_value_t = 1000)]
    pub validation: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct StatsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fields: Option<String>,
    #[arg(long, default_value_t = 60)]
    pub bins: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct NormalizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fields: Option<String>,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    pub kind: KindArg,
    #[arg(long)]
    pub fields: Option<String>,
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// JSONL of `{id, prompt, response_a, response_b}`.
    #[arg(long)]
    pub tasks: PathBuf,
    /// JSON object mapping bearer tokens to labeler ids.
    #[arg(long)]
    pub tokens: PathBuf,
    /// Append-only label store; replayed on start.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long, default_value_t = 900)]
    pub lease_secs: u64,
    #[arg(long, default_value_t = 1)]
    pub labels_per_task: usize,
    /// Shuffle task order with this seed.
    #[arg(long)]
    pub shuffle_seed: Option<u64>,
    /// Per-labeler WTP budget.
    #[arg(long)]
    pub budget: Option<f64>,
    #[arg(long, requires = "budget")]
    pub enforce_budget: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct PipelineArgs {
    #[command(flatten)]
    pub experiment: ExperimentOverrides,
    /// Validation tuples for margin-stratified agreement.
    #[arg(long, default_value_t = 1000)]
    pub validation: usize,
    #[command(flatten)]
    #[serde(skip)]
    pub out: OutArgs,
}
