mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmlstm_core::trainer::Architecture;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mmlstm", version, about = "Multimodal LSTM speaker identification on synthetic data")]
struct Cli {
    /// TOML file with optional [synth], [train], [scenes] and [eval] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for evaluation reports.
    #[arg(long, global = true, env = "MMLSTM_REPORT_DIR", default_value = "reports")]
    report_dir: PathBuf,

    /// Single-threaded, bitwise reproducible execution.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic train/test pools and, optionally, scenes.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Compare analytic gradients with central differences on random small models.
    Gradcheck(GradcheckArgs),
    /// Sweep the rejection threshold on a balanced genuine/distractor test set.
    EvalRoc(EvalRocArgs),
    /// Score speaker naming on synthetic scenes for several vote windows.
    EvalScenes(EvalScenesArgs),
    /// Print predictions for recorded samples.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub train_per_class: Option<usize>,
    #[arg(long)]
    pub test_per_class: Option<usize>,
    /// Also write this many scenes.
    #[arg(long)]
    pub scenes: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint manifest path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Architecture>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub d_h: Option<usize>,
    #[arg(long)]
    pub epoch_size: Option<usize>,
    /// Modality read by single-modal models.
    #[arg(long)]
    pub modality: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// One architecture; single, full, half and none when omitted.
    #[arg(long)]
    pub variant: Option<Architecture>,
    #[arg(long, default_value_t = 20)]
    pub configs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Perturb the largest analytic entry by 1% before comparing.
    #[arg(long)]
    pub corrupt: bool,
}

#[derive(Debug, Args)]
pub struct EvalRocArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',')]
    pub m_list: Option<Vec<usize>>,
    #[arg(long)]
    pub per_kind: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvalScenesArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub model: Vec<PathBuf>,
    /// Scene manifest written by `synth --scenes`.
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub vote_window: Option<Vec<f64>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Pool to read from the data directory.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 20)]
    pub limit: usize,
}

pub struct Globals {
    pub config: RunConfig,
    pub report_dir: PathBuf,
}

pub type GlobalsRef<'a> = &'a mut Globals;

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if cli.deterministic {
        config.train.deterministic = true;
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    let mut g = Globals {
        config,
        report_dir: cli.report_dir,
    };
    match cli.command {
        Command::Synth(a) => commands::synth(&mut g, a),
        Command::Train(a) => commands::train(&mut g, a),
        Command::Gradcheck(a) => commands::gradcheck(&mut g, a),
        Command::EvalRoc(a) => commands::eval_roc(&mut g, a),
        Command::EvalScenes(a) => commands::eval_scenes(&mut g, a),
        Command::Predict(a) => commands::predict(&mut g, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
