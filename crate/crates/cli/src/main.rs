//! `blockstr` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use blockstr::{RefMode, SearchMode};

#[derive(Debug, Parser)]
#[command(
    name = "blockstr",
    version,
    about = "Permutation-based surrogate text search over VLAD descriptors"
)]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a clustered synthetic descriptor corpus and its ground truth.
    Synth(SynthArgs),
    /// Train a k-means codebook from a descriptor file.
    TrainCodebook(TrainArgs),
    /// Aggregate descriptors into normalized VLAD vectors.
    Encode(EncodeArgs),
    /// Sample reference objects from a vector store.
    SelectRefs(SelectRefsArgs),
    /// Encode a corpus as surrogate documents and build the inverted index.
    BuildIndex(BuildArgs),
    /// Run one query.
    Search(SearchArgs),
    /// Run every ground-truth query and report mAP, recall and latency.
    Evaluate(EvaluateArgs),
    /// Print index statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Str,
    Rstr,
    Bstr,
    BstrTfidf,
}

impl From<ModeArg> for SearchMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Str => SearchMode::Str,
            ModeArg::Rstr => SearchMode::RStr,
            ModeArg::Bstr => SearchMode::Bstr,
            ModeArg::BstrTfidf => SearchMode::BstrTfidf,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RefModeArg {
    Whole,
    Blockwise,
}

impl From<RefModeArg> for RefMode {
    fn from(m: RefModeArg) -> Self {
        match m {
            RefModeArg::Whole => RefMode::Whole,
            RefModeArg::Blockwise => RefMode::Blockwise,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 1000)]
    pub images: usize,
    #[arg(long, default_value_t = 50)]
    pub clusters: usize,
    /// Local descriptor dimension.
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    /// Latent visual words.
    #[arg(long, default_value_t = 32)]
    pub words: usize,
    #[arg(long, default_value_t = 128)]
    pub descriptors_per_image: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f32,
    #[arg(long, default_value_t = 0.5)]
    pub clutter: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Descriptor file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth file to write.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub descriptors: PathBuf,
    /// Codebook size.
    #[arg(long = "k", short = 'k')]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train on every n-th image only.
    #[arg(long, default_value_t = 1)]
    pub sample_every: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub descriptors: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// Vector store to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write surrogate documents (one text line per image) using these
    /// references.
    #[arg(long, requires_all = ["docs_out", "depth"])]
    pub refs: Option<PathBuf>,
    /// Truncation depth for `--docs-out`.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub docs_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SelectRefsArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub m: usize,
    #[arg(long, value_enum)]
    pub mode: RefModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Vector store holding the corpus.
    #[arg(long, conflicts_with_all = ["descriptors", "codebook"])]
    pub store: Option<PathBuf>,
    /// Descriptor file; needs `--codebook`.
    #[arg(long, requires = "codebook")]
    pub descriptors: Option<PathBuf>,
    #[arg(long)]
    pub codebook: Option<PathBuf>,
    /// Existing reference file.
    #[arg(long, conflicts_with = "m")]
    pub refs: Option<PathBuf>,
    /// Number of references to sample when `--refs` is absent.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 50)]
    pub kx: usize,
    /// Keep only this many terms per indexed document (tf-idf pruning).
    #[arg(long)]
    pub prune_docs: Option<usize>,
    /// Index file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write sampled references.
    #[arg(long)]
    pub refs_out: Option<PathBuf>,
    /// Where to write the vector store when encoding from descriptors.
    #[arg(long)]
    pub store_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Vector store holding the query vector.
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub query_id: String,
    /// Corpus vector store, needed by rstr.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 50)]
    pub kx: usize,
    #[arg(long, default_value_t = 10)]
    pub kq: usize,
    #[arg(long = "k", short = 'k', default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub c: usize,
    #[arg(long)]
    pub prune_query: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Corpus vector store; also the source of the query vectors.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Truncation depth the index was built with (echoed in reports).
    #[arg(long, default_value_t = 50)]
    pub kx: usize,
    /// Query depths to sweep.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    pub kq: Vec<usize>,
    /// Query pruning levels to sweep.
    #[arg(long, value_delimiter = ',')]
    pub prune_query: Vec<usize>,
    /// Pruning level the index was built with (echoed in reports).
    #[arg(long)]
    pub prune_docs: Option<usize>,
    /// Ranking depth used for mAP.
    #[arg(long = "k", short = 'k', default_value_t = 100)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub c: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,10")]
    pub recall: Vec<usize>,
    /// Keep each query image in its own relevant set and result list.
    #[arg(long)]
    pub include_self: bool,
    /// Report zero latency so reruns produce identical files.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub index: PathBuf,
}

/// Bad flags or flag combinations, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    // ignore failure: the global pool may already exist
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::TrainCodebook(a) => commands::train_codebook_cmd(a),
        Command::Encode(a) => commands::encode(a),
        Command::SelectRefs(a) => commands::select_refs(a),
        Command::BuildIndex(a) => commands::build_index(a),
        Command::Search(a) => commands::search(a),
        Command::Evaluate(a) => commands::evaluate(a, cli.threads),
        Command::Stats(a) => commands::stats(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
