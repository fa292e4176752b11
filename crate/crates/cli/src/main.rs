//! `skyreach`: synthetic data, share-model training and budgeted schedule
//! optimization from the command line.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use skyreach::aga::InitScheme;
use skyreach::report::Method;

#[derive(Parser, Debug)]
#[command(name = "skyreach", version, about = "Budget-constrained market influence optimization")]
pub struct Cli {
    /// Seed for every random choice (data generation, training, random init).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to the number of CPUs).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Write zero in every wall-clock field so reruns are byte-identical.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic market panel and its hidden share models.
    GenData(GenDataArgs),
    /// Fit one share model per route.
    Train(TrainArgs),
    /// Predict shares for a panel with trained models.
    Predict(PredictArgs),
    /// Cut an optimization problem for one carrier out of a panel.
    MakeProblem(MakeProblemArgs),
    /// Optimize a schedule and write a report and a trace.
    Optimize(OptimizeArgs),
    /// Compare methods on a set of problems.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// JSON generator config; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub airports: Option<usize>,
    #[arg(long)]
    pub routes: Option<usize>,
    #[arg(long)]
    pub carriers: Option<usize>,
    #[arg(long)]
    pub months: Option<usize>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// multilogit, mlp, or cv (leave-one-month-out search over MLP shapes).
    #[arg(long, default_value = "multilogit")]
    pub arch: String,
    #[arg(long, default_value_t = 3)]
    pub layers: usize,
    #[arg(long, default_value_t = 16)]
    pub width: usize,
    /// model1, model2 or all.
    #[arg(long, default_value = "all")]
    pub features: String,
    #[arg(long, default_value_t = 2000)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.96)]
    pub decay_ratio: f64,
    #[arg(long, default_value_t = 100)]
    pub decay_every: usize,
    /// Trailing months held out for the summary metrics (0: in-sample).
    #[arg(long, default_value_t = 1)]
    pub holdout: usize,
    /// Only these routes (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub routes: Option<Vec<String>>,
    /// Model directory (default: <out>/models).
    #[arg(long)]
    pub models: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Model directory (default: <out>/models).
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[arg(long)]
    pub month: Option<String>,
}

#[derive(Args, Debug)]
pub struct MakeProblemArgs {
    #[arg(long)]
    pub panel: PathBuf,
    /// Focal carrier (default: the first carrier of the panel).
    #[arg(long)]
    pub carrier: Option<String>,
    /// Period (default: the last one).
    #[arg(long)]
    pub month: Option<String>,
    /// Decision routes (default: all routes the carrier flies).
    #[arg(long, value_delimiter = ',')]
    pub routes: Option<Vec<String>>,
    #[arg(long, conflicts_with = "budget_scale")]
    pub budget: Option<f64>,
    /// Budget as a multiple of the carrier's observed spend.
    #[arg(long, default_value_t = 1.0)]
    pub budget_scale: f64,
    /// Reference trained models by directory.
    #[arg(long, conflicts_with = "ground_truth")]
    pub models: Option<PathBuf>,
    /// Inline the generator's hidden models instead.
    #[arg(long)]
    pub ground_truth: Option<PathBuf>,
    /// Output file (default: <out>/problem.json).
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct MethodArgs {
    /// Step size, or `auto` to calibrate it from the starting gradient.
    #[arg(long, default_value = "auto", value_parser = parse_auto)]
    pub gamma: AutoValue,
    /// Overrun decrease rate, or `auto` to calibrate it.
    #[arg(long, default_value = "auto", value_parser = parse_auto)]
    pub epsilon: AutoValue,
    /// Grid step for greedy and brute force.
    #[arg(long, default_value_t = 1)]
    pub alpha: u32,
    /// zero, real or random.
    #[arg(long, default_value = "zero", value_parser = parse_init)]
    pub init: InitScheme,
    #[arg(long, default_value_t = 500)]
    pub min_epochs: usize,
    #[arg(long, default_value_t = 2000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 1024)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub route_limit: usize,
    #[arg(long, default_value_t = 50_000_000)]
    pub max_points: u64,
}

#[derive(Args, Debug)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// aga-lagrange, aga-relu, greedy or brute.
    #[arg(long, value_parser = parse_method)]
    pub method: Method,
    /// Model directory overriding the one named in the problem file.
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[command(flatten)]
    pub method_args: MethodArgs,
}

#[derive(Args, Debug)]
pub struct BenchmarkArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub problems: Vec<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_method, default_value = "aga-relu,greedy")]
    pub methods: Vec<Method>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long)]
    pub models: Option<PathBuf>,
    #[command(flatten)]
    pub method_args: MethodArgs,
}

/// A number or `auto`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AutoValue(pub Option<f64>);

fn parse_auto(s: &str) -> Result<AutoValue, String> {
    if s == "auto" {
        return Ok(AutoValue(None));
    }
    s.parse::<f64>()
        .map(|v| AutoValue(Some(v)))
        .map_err(|_| format!("expected a number or 'auto', got '{s}'"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse()
}

fn parse_init(s: &str) -> Result<InitScheme, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
