//! `toolwatch` command-line interface.

mod commands;
mod config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Exit status of a `monitor` replay that raised at least one alert.
pub const EXIT_ALERTS: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "toolwatch", version, about = "Pre-action monitoring of agent tool decisions")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every randomized step; recorded in provenance.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Primary output path (a directory for `synth`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InputFormat {
    /// One JSON record per trajectory step.
    Trajectory,
    /// Multi-turn function-calling episodes, one JSON object per line.
    Bfcl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    ToolNeed,
    ToolRisk,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert trajectories into decision rows.
    Ingest(IngestArgs),
    /// Attach risk tiers to tool-needed rows.
    LabelRisk(LabelRiskArgs),
    /// Generate a synthetic activation store, SAE stack and rows.
    Synth(SynthArgs),
    /// Encode an activation store with an SAE stack.
    Encode(EncodeArgs),
    /// Train a probe on a seeded trajectory-level split.
    Train(TrainArgs),
    /// Evaluate a probe, or score a predictions file or confusion matrix.
    Eval(EvalArgs),
    /// Ablate top-ranked features and size-matched random controls.
    Ablate(AblateArgs),
    /// Export evidence packets for top features, or import their labels.
    Evidence(EvidenceArgs),
    /// Summarize monitor events into episode and corpus reports.
    Report(ReportArgs),
    /// Replay decision rows through the monitor.
    Monitor(MonitorArgs),
    /// Run the monitor as a newline-delimited JSON TCP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum, default_value = "trajectory")]
    pub format: InputFormat,
}

#[derive(Debug, Args)]
pub struct LabelRiskArgs {
    #[arg(long)]
    pub rows: Option<PathBuf>,
    /// Keyword scheme (TOML); the built-in scheme when absent.
    #[arg(long)]
    pub scheme: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 400)]
    pub rows: usize,
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, value_delimiter = ',', default_value = "3,7,11,15,19,23")]
    pub layers: Vec<u32>,
    #[arg(long, default_value_t = 32)]
    pub features_per_layer: usize,
    #[arg(long, default_value_t = 8.0)]
    pub margin: f64,
    /// Plant no signal at all.
    #[arg(long)]
    pub null: bool,
    #[arg(long, default_value_t = 0.5)]
    pub tool_fraction: f64,
    #[arg(long, default_value_t = 8)]
    pub steps_per_trajectory: usize,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// SAE layer files, comma separated or repeated.
    #[arg(long, value_delimiter = ',')]
    pub sae: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub rows: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Named preset (gpt-oss-tool-need, gemma-tool-need, tool-risk).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_select: Option<usize>,
    /// Fraction of trajectories held out for evaluation.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub decision_threshold: Option<f64>,
    #[arg(long)]
    pub uncertainty_band: Option<f64>,
    #[arg(long)]
    pub inverse_frequency_weights: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Same split as `train`; evaluate on the held-out side only.
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Evaluate on every row instead of the held-out split.
    #[arg(long)]
    pub all_rows: bool,
    /// JSONL of {"truth": i, "predicted": j} pairs.
    #[arg(long, conflicts_with_all = ["model", "confusion"])]
    pub predictions: Option<PathBuf>,
    /// Confusion matrix as JSON, rows = truth, columns = prediction.
    #[arg(long, conflicts_with = "model")]
    pub confusion: Option<String>,
    /// Class count for --predictions.
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Number of held-out steps to ablate.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    pub sizes: Vec<usize>,
    /// Rank by |training mean × weight| instead of |weight|.
    #[arg(long)]
    pub mean_activation_score: bool,
}

#[derive(Debug, Args)]
pub struct EvidenceArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub rows: Option<PathBuf>,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Number of top-ranked features to export.
    #[arg(long, default_value_t = 20)]
    pub top_features: usize,
    /// Rows per packet.
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
    /// Labeled packets to attach to the model's ranking instead of exporting.
    #[arg(long)]
    pub import: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub events: PathBuf,
}

#[derive(Debug, Args)]
pub struct MonitorArgs {
    /// Rows supplying the expected side.
    #[arg(long)]
    pub rows: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub sae: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub risk_model: Option<PathBuf>,
    /// JSONL of runtime actions; without it every verdict is pre-execution.
    #[arg(long)]
    pub actions: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub sae: Vec<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub risk_model: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
