use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod data;

#[derive(Parser)]
#[command(name = "agegraph", version, about = "Masked contrastive graph learning for age estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, metrics and effective config.
    Train(RunArgs),
    /// Evaluate a checkpoint: MAE and cumulative scores at 0..=10 years.
    Eval(EvalArgs),
    /// Train each graph-convolution variant on the same seed and data.
    AblateConv(RunArgs),
    /// Train the seven on/off combinations of the three contrastive terms.
    AblateLoss(RunArgs),
    /// Train at mask rates 0.1, 0.2, ..., 0.9.
    MaskSweep(RunArgs),
    /// Finite-difference check of every op, module and the full objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Clone, Debug)]
pub struct DataArgs {
    /// Generate N synthetic training images plus N/5 (at least 1) for validation.
    #[arg(long, value_name = "N", conflicts_with_all = ["dataset", "labels"])]
    pub synthetic: Option<usize>,
    /// Image root directory; `--labels` paths are relative to it.
    #[arg(long, value_name = "DIR", requires = "labels")]
    pub dataset: Option<PathBuf>,
    /// CSV with header `filename,age`.
    #[arg(long, value_name = "CSV", requires = "dataset")]
    pub labels: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// TOML training config; defaults apply to missing keys.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loss.alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long, value_name = "S")]
    pub seed: Option<u64>,
    #[arg(long, value_name = "E")]
    pub epochs: Option<usize>,
}

#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory (created if missing).
    #[arg(long, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Args, Clone, Debug)]
pub struct EvalArgs {
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Config the checkpoint must be compatible with.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Split to evaluate; defaults to test, or val when there is no test split.
    #[arg(long, value_enum)]
    pub split: Option<data::SplitArg>,
    /// Also write `eval.csv` here.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct GradcheckArgs {
    /// Largest accepted relative error.
    #[arg(long, default_value_t = agegraph_core::verify::TOLERANCE)]
    pub tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::AblateConv(a) => commands::experiment(&a, commands::Kind::Conv),
        Command::AblateLoss(a) => commands::experiment(&a, commands::Kind::Loss),
        Command::MaskSweep(a) => commands::experiment(&a, commands::Kind::Mask),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
