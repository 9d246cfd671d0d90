//! `concept-audit`: expand prompt distributions, ingest detection records,
//! compute concept audits and serve them over HTTP.
//!
//! Exit status is 0 on success, 1 when arguments fail validation and 2 when
//! input data cannot be used.

mod commands;
mod render;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use concept_audit::RankMetric;

#[derive(Debug, Parser)]
#[command(name = "concept-audit", version, about = "Concept-level audits of text-to-image outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand a prompt-spec file into prompt lines.
    ExpandPrompts(ExpandArgs),
    /// Validate and merge detection-record streams into a corpus file.
    Ingest(IngestArgs),
    /// Compute the full audit report of a corpus.
    Audit(AuditArgs),
    /// Co-occurrence partners of one concept, or the whole pair table.
    Cooc(CoocArgs),
    /// Scan a corpus for watchlist concepts.
    Flag(FlagArgs),
    /// Compare concept frequencies of two corpora.
    Diff(DiffArgs),
    /// Build a negative-prompt directive for a generation backend.
    Negative(NegativeArgs),
    /// Serve corpora over the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Md,
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Output file; `-` or absent writes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Debug, Args)]
struct ExpandArgs {
    #[arg(long)]
    prompt_spec: PathBuf,
    /// Draw this many prompts (with replacement, by weight) instead of the full expansion.
    #[arg(long)]
    sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IngestArgs {
    /// Record streams; the first must start with a header. `-` reads stdin.
    #[arg(long, num_args = 1.., required = true)]
    records: Vec<PathBuf>,
    /// JSON object mapping labels to canonical labels.
    #[arg(long)]
    aliases: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip invalid lines and report them instead of failing.
    #[arg(long)]
    lenient: bool,
}

#[derive(Debug, Args)]
struct AuditArgs {
    /// Corpus file; `-` reads stdin.
    #[arg(long, default_value = "-")]
    corpus: PathBuf,
    #[arg(long, default_value_t = concept_audit::metrics::DEFAULT_TAU, allow_negative_numbers = true)]
    tau: f64,
    #[arg(long, default_value_t = concept_audit::metrics::DEFAULT_CV_CUTOFF, allow_negative_numbers = true)]
    cv_cutoff: f64,
    #[arg(long, default_value_t = concept_audit::metrics::DEFAULT_CI_GROUPS)]
    ci_groups: usize,
    /// Images per subsample; defaults to min(1000, images / 2).
    #[arg(long)]
    ci_size: Option<usize>,
    /// Skip confidence intervals.
    #[arg(long)]
    no_ci: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of concepts in the top list.
    #[arg(long, default_value_t = concept_audit::report::DEFAULT_TOP_M)]
    top: usize,
    /// Partners listed per top concept.
    #[arg(long, default_value_t = concept_audit::report::DEFAULT_PARTNERS_K)]
    k: usize,
    #[arg(long, default_value = "lift", value_parser = parse_metric)]
    metric: RankMetric,
    /// File with one watchlist label per line.
    #[arg(long)]
    watchlist: Option<PathBuf>,
    #[arg(long, default_value_t = concept_audit::mining::DEFAULT_EVIDENCE_LIMIT)]
    evidence_limit: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct CoocArgs {
    #[arg(long, default_value = "-")]
    corpus: PathBuf,
    #[arg(long)]
    concept: Option<String>,
    #[arg(long, default_value_t = 20)]
    k: usize,
    #[arg(long, default_value = "lift", value_parser = parse_metric)]
    metric: RankMetric,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    min_support: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct FlagArgs {
    #[arg(long, default_value = "-")]
    corpus: PathBuf,
    /// File with one label per line; blank lines and `#` comments are ignored.
    #[arg(long)]
    watchlist: PathBuf,
    #[arg(long, default_value_t = concept_audit::mining::DEFAULT_EVIDENCE_LIMIT)]
    evidence_limit: usize,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct DiffArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = concept_audit::report::DEFAULT_FLOOR, allow_negative_numbers = true)]
    floor: f64,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct NegativeArgs {
    /// Concepts to steer away from (comma separated or repeated).
    #[arg(long, value_delimiter = ',')]
    attenuate: Vec<String>,
    /// Concepts to emphasize.
    #[arg(long, value_delimiter = ',')]
    amplify: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    media_root: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Allowed UI origin; any origin when absent.
    #[arg(long)]
    cors_origin: Option<String>,
}

fn parse_metric(s: &str) -> Result<RankMetric, String> {
    s.parse()
}

/// A failed command. `Validation` maps to exit status 1, `Data` to 2.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Data(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Validation(_) => 1,
            Self::Data(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Validation(m) | Self::Data(m) => f.write_str(m),
        }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CONCEPT_AUDIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| Failure::Validation(format!("CONCEPT_AUDIT_THREADS must be a positive integer (got `{raw}`)")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Validation(e.to_string()))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let _ = err.print();
            return if err.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();

    let result = configure_threads().and_then(|()| commands::run(cli.command));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}
