mod commands;
mod config;
mod fail;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longview::util::CancelToken;
use tracing_subscriber::EnvFilter;

/// Adaptive long-video question answering: a cheap direct pass, escalated
/// to a tool-using reasoner when the answer confidence is low.
#[derive(Debug, Parser)]
#[command(name = "longview", version, propagate_version = true)]
pub struct Cli {
    /// Log filter for the JSON logs written to stderr (e.g. info, longview=debug).
    #[arg(long, global = true, env = "LONGVIEW_LOG", default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse SRT, WebVTT or Whisper JSON subtitles into canonical tracks.
    IngestSubtitles(IngestArgs),
    /// Build clip and subtitle embedding indexes.
    BuildIndex(BuildIndexArgs),
    /// Generate a synthetic world bundle.
    WorldGen(WorldGenArgs),
    /// Sample tool-use trajectories and keep the correct ones.
    Synthesize(SynthesizeArgs),
    /// Turn trajectories into training records and dataset statistics.
    Ground(GroundArgs),
    /// Answer one task with the adaptive policy.
    Run(RunArgs),
    /// Evaluate the adaptive policy over a task set.
    Eval(EvalArgs),
    /// Evaluate over a range of values of one policy parameter.
    Sweep(SweepArgs),
    /// Summarize a results file with accuracy and calibration tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Subtitle files to parse.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
    /// Input format (srt, vtt, whisper-json); inferred from the extension when absent.
    #[arg(long)]
    pub format: Option<String>,
    /// Video id for a single input; defaults to the file stem.
    #[arg(long)]
    pub video_id: Option<String>,
    /// Output directory for `<video_id>.json` tracks.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    /// Config file supplying world, catalog, subtitles and embedder settings.
    #[arg(long, env = "LONGVIEW_CONFIG")]
    pub config: Option<PathBuf>,
    /// World bundle directory.
    #[arg(long)]
    pub world: Option<PathBuf>,
    /// JSON-lines video catalog.
    #[arg(long)]
    pub catalog: Option<PathBuf>,
    /// Directory of canonical subtitle tracks.
    #[arg(long)]
    pub subtitles: Option<PathBuf>,
    /// JSON-lines clip descriptions ({video_id, start_s, end_s, text}) for clip indexes.
    #[arg(long)]
    pub clip_texts: Option<PathBuf>,
    /// Embedder seed.
    #[arg(long, env = "LONGVIEW_EMBED_SEED")]
    pub embed_seed: Option<u64>,
    /// Embedding dimension.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Output directory for the index files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct WorldGenArgs {
    /// World spec JSON; flags override its fields.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// World seed.
    #[arg(long, env = "LONGVIEW_SEED")]
    pub seed: Option<u64>,
    /// Number of videos.
    #[arg(long)]
    pub videos: Option<usize>,
    /// Planted events (and tasks) per video.
    #[arg(long)]
    pub events: Option<usize>,
    /// Shortest video length in minutes.
    #[arg(long)]
    pub min_minutes: Option<f64>,
    /// Longest video length in minutes.
    #[arg(long)]
    pub max_minutes: Option<f64>,
    /// Probability that the scripted tool policy answers wrongly after finding the scene.
    #[arg(long)]
    pub mistake_rate: Option<f64>,
    /// Output directory for the bundle.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Config file (JSON).
    #[arg(long, env = "LONGVIEW_CONFIG")]
    pub config: PathBuf,
    /// Run seed; overrides the config.
    #[arg(long, env = "LONGVIEW_SEED")]
    pub seed: Option<u64>,
    /// Worker threads; overrides the config.
    #[arg(long, env = "LONGVIEW_WORKERS")]
    pub workers: Option<usize>,
    /// Task file (JSON lines); defaults to the config's tasks or the world's tasks.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Samples per task.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Reasoning steps per sample.
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Also write every sample, kept or not, to this file.
    #[arg(long)]
    pub samples_out: Option<PathBuf>,
    /// Output file for kept trajectories (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GroundArgs {
    /// Config file (JSON) naming the video catalog.
    #[arg(long, env = "LONGVIEW_CONFIG")]
    pub config: PathBuf,
    /// Trajectory file (JSON lines).
    #[arg(long)]
    pub trajectories: PathBuf,
    /// Output file for training records (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
    /// Output file for dataset statistics (JSON).
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PolicyArgs {
    /// Confidence threshold; escalate when confidence is below it.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Frames for the direct stage.
    #[arg(long)]
    pub n: Option<usize>,
    /// Retrieved clips for the direct stage on long videos.
    #[arg(long)]
    pub k: Option<usize>,
    /// Total frame budget per task.
    #[arg(long)]
    pub frame_budget: Option<usize>,
    /// Default topk for retrieval tools.
    #[arg(long)]
    pub tool_topk: Option<usize>,
    /// Tool-stage step limit.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Task to answer.
    #[arg(long)]
    pub task_id: String,
    /// Write the result with its trace (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Keep tool-stage traces in the results.
    #[arg(long)]
    pub trace: bool,
    /// Write the report (JSON) here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Output file for per-task results (JSON lines).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Parameter to vary: tau, n, k or tool-topk.
    #[arg(long)]
    pub axis: String,
    /// Comma-separated values, e.g. 0,0.2,0.4.
    #[arg(long)]
    pub values: String,
    /// Output CSV file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Results file written by eval (JSON lines).
    #[arg(long)]
    pub results: PathBuf,
    /// Number of calibration bins.
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    /// Write the report and calibration table (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn init_logging(level: &str) -> Result<(), String> {
    let filter = EnvFilter::try_new(level).map_err(|e| format!("bad --log-level {level:?}: {e}"))?;
    tracing_subscriber::fmt().json().with_env_filter(filter).with_writer(std::io::stderr).init();
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = init_logging(&cli.log_level) {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let cancel = CancelToken::new();
    let handler = cancel.clone();
    if let Err(e) = ctrlc::set_handler(move || handler.cancel()) {
        tracing::warn!(error = %e, "could not install the interrupt handler");
    }
    match commands::dispatch(cli.command, &cancel) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            tracing::error!(error = %f, "command failed");
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
