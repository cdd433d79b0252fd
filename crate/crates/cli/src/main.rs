// SPDX-License-Identifier: MIT OR Apache-2.0

//! `sts`: train sparse autoencoders on activation dumps, find the feature
//! dimensions that move under in-context demonstrations, and score how much
//! downstream domains load on them.
//!
//! Exit codes: 0 success, 1 invalid input, 2 I/O or file-format error,
//! 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sts_core::Error;

mod commands;
mod inputs;

#[derive(Parser)]
#[command(name = "sts", version, about = "SAE feature-shift analysis and transferability scores")]
struct Cli {
    /// Load and check every input, then stop without computing
    #[arg(long, global = true)]
    validate_only: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted synthetic world and its activation dumps
    Synth(SynthArgs),
    /// Train a sparse autoencoder on a raw activation dump
    TrainSae(TrainArgs),
    /// Encode a raw dump into SAE feature space
    Encode(EncodeArgs),
    /// Rank dimensions by mean squared change between plain and in-context dumps
    Shift(ShiftArgs),
    /// Compute per-domain transferability scores over a dimension set
    Score(ScoreArgs),
    /// Pearson correlation and least-squares fit of scores against shifts
    Correlate(CorrelateArgs),
    /// Aggregate correlation results from repeated runs
    Aggregate(AggregateArgs),
    /// Size of the intersection of two dimension sets
    Overlap(OverlapArgs),
    /// Data-mixture weights proportional to scores
    Mix(MixArgs),
    /// Cumulative share of shift mass held by the top-ranked dimensions
    Concentration(ConcentrationArgs),
    /// Zero selected feature dimensions of a dump
    Zero(ZeroArgs),
    /// Match the planted shifted features of a synthetic world to SAE or raw dimensions
    Match(MatchArgs),
    /// Scatter data and fitted line for plotting scores against shifts
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// World specification (TOML); defaults are used when absent
    #[arg(long)]
    spec: Option<PathBuf>,
    /// World seed (overrides the spec)
    #[arg(long)]
    seed: Option<u64>,
    /// Set the noise scale from a signal-to-noise ratio
    #[arg(long)]
    snr: Option<f64>,
    /// Tokens in the mixture and training-domain streams (overrides the spec)
    #[arg(long)]
    tokens: Option<usize>,
    /// Tokens per downstream-domain stream
    #[arg(long, default_value_t = 4000)]
    domain_tokens: usize,
    /// Seed for token sampling
    #[arg(long, default_value_t = 1)]
    sample_seed: u64,
    /// Also write the oracle SAE built from the true dictionary
    #[arg(long)]
    oracle: bool,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Topk,
    Relu,
}

#[derive(Args)]
struct TrainArgs {
    /// Raw activation dump
    #[arg(long)]
    activations: PathBuf,
    /// Base configuration (TOML); flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    arch: Option<Arch>,
    /// Hidden width
    #[arg(long)]
    hidden: Option<usize>,
    /// Active features per token for TopK
    #[arg(long)]
    k: Option<usize>,
    /// Final L1 coefficient
    #[arg(long)]
    l1: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Base learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_warmup: Option<usize>,
    #[arg(long)]
    l1_warmup: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Model file; the config echo and training log are written next to it
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    activations: PathBuf,
    #[arg(long)]
    sae: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    /// Dump without context
    #[arg(long)]
    plain: PathBuf,
    /// Dump with context
    #[arg(long)]
    ctx: PathBuf,
    /// Encode raw dumps with this SAE first; without it the dumps are scored as given
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    top_n: usize,
    /// Include the full ranking in the report
    #[arg(long)]
    full_ranking: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    /// Dimension set: a shift report, a JSON list, or a comma-separated list
    #[arg(long)]
    dims: String,
    #[arg(long, value_enum, default_value = "icl")]
    mode: Mode,
    /// Feature dump of a domain, as ID=PATH (repeatable)
    #[arg(long = "features")]
    features: Vec<String>,
    /// Plain and in-context dumps of a domain, as ID=PLAIN,CTX (repeatable)
    #[arg(long = "pair")]
    pairs: Vec<String>,
    /// Encode raw inputs with this SAE
    #[arg(long)]
    sae: Option<PathBuf>,
    /// Performance shifts as CSV with columns domain_id,shift
    #[arg(long)]
    perf: Option<PathBuf>,
    /// Score table (JSON)
    #[arg(long)]
    out: PathBuf,
    /// Also write the table as CSV
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Act,
    Icl,
}

impl From<Mode> for sts_core::StsMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Act => sts_core::StsMode::Act,
            Mode::Icl => sts_core::StsMode::Icl,
        }
    }
}

#[derive(Args)]
struct CorrelateArgs {
    /// Score table with joined performance shifts
    #[arg(long, conflicts_with_all = ["x", "y"])]
    table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "icl")]
    mode: Mode,
    /// Comma-separated x values
    #[arg(long, requires = "y")]
    x: Option<String>,
    /// Comma-separated y values
    #[arg(long, requires = "x")]
    y: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write x,y,fitted rows as CSV
    #[arg(long)]
    scatter: Option<PathBuf>,
}

#[derive(Args)]
struct AggregateArgs {
    /// Correlation result files from `correlate --out`
    #[arg(required = true)]
    results: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct OverlapArgs {
    /// First dimension set
    #[arg(long)]
    a: String,
    /// Second dimension set (recall is reported against it)
    #[arg(long)]
    b: String,
}

#[derive(Args)]
struct MixArgs {
    /// Scores as ID=VALUE, comma-separated or repeated
    #[arg(long = "values", conflicts_with = "table")]
    values: Vec<String>,
    /// Take scores from a score table
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "icl")]
    mode: Mode,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConcentrationArgs {
    /// Shift report
    #[arg(long)]
    report: PathBuf,
    /// Fractions of dimensions to report, comma-separated
    #[arg(long, default_value = "0.01,0.05,0.1")]
    fractions: String,
    /// Write the full curve as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ZeroArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    dims: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MatchArgs {
    /// Spec of the synthetic world (as written by `synth`)
    #[arg(long)]
    spec: PathBuf,
    /// SAE to match against; raw coordinate axes when absent
    #[arg(long)]
    sae: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, value_enum, default_value = "icl")]
    mode: Mode,
    #[arg(long)]
    out_dir: PathBuf,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Validation(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) | Error::Diverged { .. } => 3,
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var("STS_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n >= 1)
        .ok_or_else(|| format!("STS_THREADS must be a positive integer, got `{value}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }
    let check = cli.validate_only;
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a, check),
        Command::TrainSae(a) => commands::train_sae(a, check),
        Command::Encode(a) => commands::encode(a, check),
        Command::Shift(a) => commands::shift(a, check),
        Command::Score(a) => commands::score(a, check),
        Command::Correlate(a) => commands::correlate(a, check),
        Command::Aggregate(a) => commands::aggregate(a, check),
        Command::Overlap(a) => commands::overlap(a, check),
        Command::Mix(a) => commands::mix(a, check),
        Command::Concentration(a) => commands::concentration(a, check),
        Command::Zero(a) => commands::zero(a, check),
        Command::Match(a) => commands::match_planted(a, check),
        Command::Report(a) => commands::report(a, check),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
