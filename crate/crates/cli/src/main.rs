mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tda_core::Error;

/// Threshold-based dynamic activation on a small decoder-only transformer.
#[derive(Parser, Debug)]
#[command(name = "tda", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Weight file (safetensors). The config is read from the sibling `.json`
    /// file unless `--config` is given.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,

    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Threshold profile JSON.
    #[arg(long, global = true)]
    pub profile: Option<PathBuf>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, global = true, env = "TDA_OUT_DIR", default_value = ".")]
    pub out_dir: PathBuf,

    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Cap on worker threads for parallel sections.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Calibrate per-layer thresholds against a CETT target.
    SearchThresholds(SearchArgs),
    /// Generate a continuation with one FFN strategy.
    Generate(GenerateArgs),
    /// Similarity battery and flocking heatmaps.
    AnalyzeInertia(InertiaArgs),
    /// Compare generation latency, FLOPs and fidelity across strategies.
    Bench(BenchArgs),
    /// Train the toy classifier and record hidden-unit sparsity.
    Emergence(EmergenceArgs),
    /// Write a randomly initialized model.
    MakeToyModel(ToyModelArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Dense,
    Tt,
    Griffin,
    Tda,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReduceArg {
    Mean,
    Max,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MagnitudeArg {
    Full,
    GatedOnly,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Jaccard,
    Cosine,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Relu,
    Swiglu,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
    Markdown,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum ActivationArg {
    Relu,
    Silu,
    ReluSquared,
}

#[derive(Args, Debug)]
pub struct SearchArgs {
    /// UTF-8 text; every non-empty line is a separate calibration prompt.
    #[arg(long)]
    pub calibration: PathBuf,

    #[arg(long, default_value_t = tda_core::sparsity::DEFAULT_CETT_TARGET)]
    pub cett_target: f64,

    /// Output path; defaults to `<out-dir>/profile.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = ReduceArg::Mean)]
    pub reduce: ReduceArg,

    #[arg(long, value_enum, default_value_t = MagnitudeArg::Full)]
    pub magnitude: MagnitudeArg,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,

    #[arg(long, value_enum, default_value_t = StrategyArg::Dense)]
    pub strategy: StrategyArg,

    /// Fraction of neurons Griffin drops per layer.
    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,

    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,

    /// Sample at this temperature (seeded by `--seed`) instead of greedy.
    #[arg(long)]
    pub temperature: Option<f32>,

    /// Rebuild masks every N generated tokens.
    #[arg(long)]
    pub mask_refresh: Option<usize>,
}

#[derive(Args, Debug)]
pub struct InertiaArgs {
    /// JSON list of `{index, text, treatment}`; the built-in thirteen
    /// samples when omitted.
    #[arg(long)]
    pub samples: Option<PathBuf>,

    #[arg(long, value_enum, default_value_t = MetricArg::Jaccard)]
    pub metric: MetricArg,

    /// Use one layer instead of averaging across layers.
    #[arg(long)]
    pub layer: Option<usize>,

    /// Fixed binarization threshold (ignored when a profile is given).
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 128)]
    pub prompt_len: usize,

    #[arg(long, default_value_t = 128)]
    pub new_tokens: usize,

    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [StrategyArg::Dense, StrategyArg::Tt, StrategyArg::Griffin, StrategyArg::Tda])]
    pub strategies: Vec<StrategyArg>,

    #[arg(long, default_value_t = 5)]
    pub repetitions: usize,

    #[arg(long, default_value_t = 1)]
    pub warmups: usize,

    #[arg(long, default_value_t = 0.5)]
    pub sparsity: f64,

    #[arg(long, default_value_t = tda_core::sparsity::DEFAULT_CETT_TARGET)]
    pub cett_target: f64,

    #[arg(long, default_value_t = 128)]
    pub calibration_len: usize,

    /// Report formats to write, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FormatArg::Json, FormatArg::Csv, FormatArg::Markdown])]
    pub formats: Vec<FormatArg>,
}

#[derive(Args, Debug)]
pub struct EmergenceArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Both)]
    pub variant: VariantArg,

    #[arg(long)]
    pub steps: Option<usize>,

    #[arg(long)]
    pub lr: Option<f64>,

    #[arg(long)]
    pub d_in: Option<usize>,

    #[arg(long)]
    pub d_hidden: Option<usize>,

    #[arg(long)]
    pub classes: Option<usize>,

    #[arg(long)]
    pub record_every: Option<usize>,
}

#[derive(Args, Debug)]
pub struct ToyModelArgs {
    #[arg(long, default_value_t = 4)]
    pub layers: usize,

    #[arg(long, default_value_t = 256)]
    pub d_model: usize,

    #[arg(long, default_value_t = 1024)]
    pub d_ff: usize,

    #[arg(long, default_value_t = 4)]
    pub heads: usize,

    #[arg(long, default_value_t = 257)]
    pub vocab: usize,

    #[arg(long, value_enum, default_value_t = ActivationArg::Silu)]
    pub activation: ActivationArg,

    #[arg(long, default_value_t = 512)]
    pub max_seq_len: usize,

    #[arg(long)]
    pub sinusoidal_positions: bool,

    /// Output weight file; defaults to `<out-dir>/model.safetensors`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Failure of a subcommand, carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(Error::Divergence { .. }) => 4,
            CliError::Core(_) => 3,
        }
    }
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter =
        tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| level.into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.global.verbose);
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            tracing::warn!("could not size the thread pool: {e}");
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Usage(msg) => eprintln!("error: {msg}"),
                CliError::Core(err) => eprintln!("error: {err}"),
            }
            ExitCode::from(e.exit_code())
        }
    }
}
