//! `taser`: data generation, training, mining, indexing, search and
//! evaluation for the single-encoder retrieval lab.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use taser_core::{Error, RoutingKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "taser", version, about = "Single-encoder dense retrieval lab")]
struct Cli {
    /// JSON run configuration; every field is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `paths.workspace`.
    #[arg(long, global = true)]
    workspace: Option<PathBuf>,
    /// Overrides `paths.corpus`.
    #[arg(long, global = true)]
    corpus: Option<PathBuf>,
    /// Overrides `paths.train`.
    #[arg(long, global = true)]
    train: Option<PathBuf>,
    /// Overrides `paths.dev`.
    #[arg(long, global = true)]
    dev: Option<PathBuf>,
    /// Overrides `model.routing`.
    #[arg(long, global = true)]
    routing: Option<RoutingKind>,
    /// Overrides `train.epochs`.
    #[arg(long, global = true)]
    epochs: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parameter-count table for every routing variant.
    Params(ParamsArgs),
    /// Generate a synthetic corpus with train and dev questions.
    MakeTask,
    /// Train an encoder; `--init` continues from a checkpoint.
    Train(TrainArgs),
    /// Mine dense hard negatives for the training questions.
    Mine(MineArgs),
    /// Build the dense and BM25 indexes of the corpus.
    Embed(CheckpointArgs),
    /// Retrieve for a dataset and write a TREC run file.
    Search(SearchArgs),
    /// Score a run file against a dataset.
    Eval(EvalArgs),
    /// Grid-search the hybrid fusion weight on the dev set.
    TuneAlpha(TuneArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    BertBase,
    Config,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// `bert-base` dimensions, or the model section of the run config.
    #[arg(long, value_enum, default_value = "bert-base")]
    preset: Preset,
    /// Vocabulary size for `--preset config`.
    #[arg(long, default_value_t = 30522)]
    vocab_size: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Checkpoint to continue from; its vocabulary is reused.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Output checkpoint; defaults to `<workspace>/model.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// BM25 negatives added to questions that carry none.
    #[arg(long, default_value_t = 1)]
    bm25_negatives: usize,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    /// Defaults to `<workspace>/model.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MineArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    /// Output dataset; defaults to `<workspace>/train_mined.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// BM25 negatives added to questions that carry none before mining.
    #[arg(long, default_value_t = 1)]
    bm25_negatives: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Dev,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SearchMode {
    Dense,
    Bm25,
    Hybrid,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long, value_enum, default_value = "dev")]
    split: Split,
    /// Defaults to hybrid when a fusion weight is known, else dense.
    #[arg(long, value_enum)]
    mode: Option<SearchMode>,
    /// Fusion weight; overrides `retrieval.alpha` and `<workspace>/alpha.json`.
    #[arg(long)]
    alpha: Option<f64>,
    /// Output run; defaults to `<workspace>/run.<split>.trec`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// TREC run file; defaults to `<workspace>/run.<split>.trec`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "dev")]
    split: Split,
    /// Graded judgments `qid 0 docid grade` for nDCG.
    #[arg(long)]
    qrels: Option<PathBuf>,
    /// Output report; defaults to `<workspace>/metrics.<split>.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    /// Cutoff of the dev recall being maximized.
    #[arg(long, default_value_t = 20)]
    metric_k: usize,
}

impl Cli {
    fn run_config(&self) -> Result<RunConfig, Error> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if self.seed.is_some() {
            c.seed = self.seed;
        }
        let paths = &mut c.paths;
        for (field, value) in [
            (&mut paths.workspace, &self.workspace),
            (&mut paths.corpus, &self.corpus),
            (&mut paths.train, &self.train),
            (&mut paths.dev, &self.dev),
        ] {
            if value.is_some() {
                field.clone_from(value);
            }
        }
        if let Some(r) = self.routing {
            c.model.routing = r;
        }
        if let Some(e) = self.epochs {
            c.train.epochs = e;
        }
        Ok(c)
    }
}

fn report(e: &Error) {
    let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{body}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = serde_json::json!({ "error": "usage", "message": e.to_string().trim_end() });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            LevelFilter::Info
        } else {
            LevelFilter::Warn
        })
        .format_timestamp(None)
        .init();
    let result = cli
        .run_config()
        .and_then(|config| commands::run(&cli.command, config));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(&e);
            ExitCode::FAILURE
        }
    }
}
