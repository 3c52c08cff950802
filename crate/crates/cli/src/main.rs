use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use leafsim_core::eval::{RelevanceFn, ScenarioKind};
use leafsim_core::tagbank::{SourceDistribution, DEFAULT_THRESHOLD};
use leafsim_core::TagKind;

mod commands;

const EXIT_DATA: u8 = 2;
const EXIT_USAGE: u8 = 64;

/// Similarity search over tree-ensemble leaf predictions, tag enrichment and
/// retrieval evaluation.
#[derive(Debug, Parser)]
#[command(name = "leafsim", version)]
struct Cli {
    /// Omit timestamps so identical inputs give byte-identical outputs.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate a leaf matrix and its metadata and write an index manifest.
    BuildIndex(BuildIndexArgs),
    /// Exact top-K search against an index.
    Query(QueryArgs),
    /// Count tag co-occurrences over AVClass output.
    Cooc(CoocArgs),
    /// Add frequently co-occurring tags to every sample.
    Enrich(EnrichArgs),
    /// Rank each sample's tags of one kind.
    Rank(RankArgs),
    /// Evaluate query hits: label homogeneity, relevance@K or mAP.
    Eval(EvalArgs),
    /// Write a seeded synthetic databank (leaves, metadata, AVClass tags).
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
struct BuildIndexArgs {
    #[arg(long)]
    leaves: PathBuf,
    #[arg(long)]
    meta: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["queries", "scenario"])))]
struct QueryArgs {
    /// Index manifest written by build-index.
    #[arg(long)]
    index: PathBuf,
    /// Query leaf matrix (.lsim).
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Metadata for --queries; needed for query shas and --exclude-self.
    #[arg(long, requires = "queries")]
    query_meta: Option<PathBuf>,
    /// Query the index with its own scenario query rows instead.
    #[arg(long, value_enum)]
    scenario: Option<ScenarioArg>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
    /// Drop hits whose sha256 equals the query's before truncating to K.
    #[arg(long)]
    exclude_self: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct CoocArgs {
    /// AVClass output.
    #[arg(long)]
    tags: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EnrichArgs {
    #[arg(long)]
    tags: PathBuf,
    /// Previous family labels, one `SHA256 family` pair per line.
    #[arg(long)]
    prev: Option<PathBuf>,
    #[arg(long)]
    cooc: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD, value_parser = parse_threshold)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RankArgs {
    #[arg(long)]
    tags: PathBuf,
    #[arg(long)]
    prev: Option<PathBuf>,
    /// Output of enrich.
    #[arg(long)]
    enriched: PathBuf,
    #[arg(long, value_enum, ignore_case = true, default_value = "FAM")]
    kind: KindArg,
    /// Distribution weighing each family source tag.
    #[arg(long, value_enum, default_value = "family")]
    source_dist: SourceDistArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    protocol: ProtocolArg,
    /// Relevance function for --protocol relevance (map always uses em).
    #[arg(long = "fn", value_enum, default_value = "em")]
    relevance: FnArg,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    /// Output of query.
    #[arg(long)]
    hits: PathBuf,
    /// Metadata of the indexed databank.
    #[arg(long)]
    meta: PathBuf,
    /// Output of rank; required by relevance and map.
    #[arg(long)]
    rankings: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
    /// Aggregate every (query, hit) relevance instead of per-query means.
    #[arg(long)]
    pooled: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_samples: usize,
    #[arg(long, default_value_t = 64)]
    n_trees: usize,
    /// Directory receiving leaves.lsim, meta.jsonl and tags.avclass.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Counterfactual,
    Unsupervised,
}

impl From<ScenarioArg> for ScenarioKind {
    fn from(s: ScenarioArg) -> Self {
        match s {
            ScenarioArg::Counterfactual => ScenarioKind::Counterfactual,
            ScenarioArg::Unsupervised => ScenarioKind::Unsupervised,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    #[value(name = "FAM")]
    Fam,
    #[value(name = "CLASS")]
    Class,
    #[value(name = "BEH")]
    Beh,
}

impl From<KindArg> for TagKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Fam => TagKind::Fam,
            KindArg::Class => TagKind::Class,
            KindArg::Beh => TagKind::Beh,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceDistArg {
    Family,
    TargetKind,
}

impl From<SourceDistArg> for SourceDistribution {
    fn from(s: SourceDistArg) -> Self {
        match s {
            SourceDistArg::Family => SourceDistribution::Family,
            SourceDistArg::TargetKind => SourceDistribution::TargetKind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProtocolArg {
    LabelHom,
    Relevance,
    Map,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FnArg {
    Em,
    Iou,
    Nes,
}

impl From<FnArg> for RelevanceFn {
    fn from(f: FnArg) -> Self {
        match f {
            FnArg::Em => RelevanceFn::Em,
            FnArg::Iou => RelevanceFn::Iou,
            FnArg::Nes => RelevanceFn::Nes,
        }
    }
}

fn parse_threshold(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("{t} is outside [0, 1]"))
    }
}

/// Errors in how the tool was invoked, as opposed to problems with the data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn configure_threads() -> Result<(), UsageError> {
    let Ok(value) = std::env::var("LEAFSIM_THREADS") else {
        return Ok(());
    };
    let n: usize = value.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        UsageError(format!(
            "LEAFSIM_THREADS must be a positive integer, got {value:?}"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| UsageError(e.to_string()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let det = cli.deterministic;
    match cli.command {
        Command::BuildIndex(a) => commands::build_index(&a, det),
        Command::Query(a) => commands::query(&a),
        Command::Cooc(a) => commands::cooc(&a),
        Command::Enrich(a) => commands::enrich(&a),
        Command::Rank(a) => commands::rank(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Synth(a) => commands::synth(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
