//! `sedd`: train, sample, infill, evaluate and verify score-entropy
//! discrete diffusion models on toy token spaces.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag, missing argument)
  3  invalid configuration or argument
  4  file missing or corrupt
  5  verification failed
  6  numerical abort during training
  1  any other runtime failure

Set SEDD_OUTPUT_DIR to redirect every default output location.";

#[derive(Debug, Parser)]
#[command(name = "sedd", version, about = "Score entropy discrete diffusion on toy token spaces", after_help = EXIT_CODES)]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a default run configuration.
    Init(InitArgs),
    /// Generate or tokenize a corpus.
    GenCorpus(GenCorpusArgs),
    /// Train a score model; writes a checkpoint and metrics.
    Train(TrainArgs),
    /// Generate sequences from a checkpoint.
    Sample(SampleArgs),
    /// Generate sequences that agree with a prompt.
    Infill(InfillArgs),
    /// Likelihood bound of a checkpoint on a corpus.
    Eval(EvalArgs),
    /// Run the oracle check suite.
    Verify(VerifyArgs),
    /// Tabulate the squared-error and score-entropy scalar losses.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Uniform,
    Absorbing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendArg {
    Tabular,
    Mlp,
    MeanMlp,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    #[arg(long, value_enum, default_value = "absorbing")]
    pub kind: KindArg,
    /// Ordinary token count.
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
    #[arg(long, value_enum, default_value = "mlp")]
    pub backend: BackendArg,
    /// Training corpus path stored in the configuration.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Validation corpus path stored in the configuration.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    #[arg(long, default_value = "sedd.toml")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusKind {
    Iid,
    Markov,
    Text,
}

#[derive(Debug, Args)]
pub struct GenCorpusArgs {
    #[arg(long, value_enum, default_value = "iid")]
    pub kind: CorpusKind,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 4)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 1000)]
    pub count: usize,
    /// Token probabilities, comma separated (iid); initial distribution (markov).
    #[arg(long)]
    pub probs: Option<String>,
    /// Markov rows separated by ';', entries by ','.
    #[arg(long)]
    pub transition: Option<String>,
    /// Source text (text kind).
    #[arg(long)]
    pub text: Option<PathBuf>,
    /// Vocabulary file, one character per line; derived from the text when absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Fraction of sequences written to `--valid-out`.
    #[arg(long, default_value_t = 0.1)]
    pub valid_fraction: f64,
    #[arg(long)]
    pub valid_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured step count.
    #[arg(long)]
    pub steps: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Euler,
    Tweedie,
    ExactTweedie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GridArg {
    Uniform,
    GeometricSigma,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run configuration supplying sampler defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, value_enum)]
    pub grid: Option<GridArg>,
    #[arg(long, default_value_t = 16)]
    pub num_samples: usize,
    /// Leave positions that are still masked at the end.
    #[arg(long)]
    pub no_final_denoise: bool,
    /// Use the raw parameters instead of their moving average.
    #[arg(long)]
    pub raw: bool,
    /// Render tokens as characters of this vocabulary.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct InfillArgs {
    #[command(flatten)]
    pub sampling: SamplingArgs,
    /// Fixed positions as `pos:token,pos:token`.
    #[arg(long)]
    pub prompt: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub mc_samples: usize,
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Include the checks that train models.
    #[arg(long)]
    pub full: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    /// Ground-truth ratio.
    #[arg(long, default_value_t = sedd_core::losses::LANDSCAPE_DEFAULT_A)]
    pub a: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lo: f64,
    #[arg(long, default_value_t = 2.0)]
    pub hi: f64,
    #[arg(long, default_value_t = 200)]
    pub points: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
