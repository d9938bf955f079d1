//! `guwen`: one entry point for the whole pipeline.
//!
//! Every subcommand that writes files also writes a run manifest next to its
//! outputs; `guwen reproduce --manifest <file>` re-executes it.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error.

mod commands;
mod config;
mod manifest;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use manifest::{Manifest, Stage};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

/// A problem with how the command was invoked rather than with the data.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(
    name = "guwen",
    version,
    about = "Classical Chinese pretraining, fine-tuning and evaluation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, simplify and split a raw corpus.
    Preprocess(PreprocessArgs),
    /// Build a character vocabulary from text files.
    BuildVocab(BuildVocabArgs),
    /// Report document and token counts per document kind.
    Stats(StatsArgs),
    /// Masked-language-model pretraining, from scratch or from a checkpoint.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained encoder on a downstream task.
    Finetune(FinetuneArgs),
    /// Decode one output per input line.
    Generate(GenerateArgs),
    /// Score candidates against references.
    Score(ScoreArgs),
    /// Write blinded human-evaluation sheets and their key.
    EvalSheets(EvalSheetsArgs),
    /// Aggregate filled sheets into a results table.
    Aggregate(AggregateArgs),
    /// Re-execute every stage of a manifest in order.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug)]
struct PreprocessArgs {
    /// Raw corpus: blank-line separated documents, first line the title.
    /// With --parallel, a two-column TSV.
    #[arg(long)]
    input: PathBuf,
    /// Document kind: article, poem or couplet.
    #[arg(long, default_value = "article")]
    kind: String,
    /// Characters to delete, one per line.
    #[arg(long, env = "GUWEN_BLACKLIST")]
    blacklist: Option<PathBuf>,
    /// Traditional to simplified mapping (TSV codepoint pairs).
    #[arg(long, env = "GUWEN_T2S")]
    t2s: Option<PathBuf>,
    /// Turn four-line poems into generation pairs: 2-2 or 1-3.
    #[arg(long, conflicts_with = "parallel")]
    cpg: Option<String>,
    /// Input is already a source/target TSV.
    #[arg(long)]
    parallel: bool,
    /// train,dev,test as counts (100,10,10) or ratios (0.8,0.1,0.1).
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long, required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// KIND=PATH, repeatable.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// TOML with optional [data], [model] and [pretrain] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "GUWEN_VOCAB")]
    vocab: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Continue from this checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    /// PTC, AMCT, CPG22, CPG13 or CCG.
    #[arg(long)]
    task: String,
    /// Task TOML; keys override the task defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pretrained encoder checkpoint.
    #[arg(long)]
    encoder: PathBuf,
    /// Discard the encoder weights and start from a fresh initialization
    /// of the same shape.
    #[arg(long)]
    random_init: bool,
    #[arg(long, env = "GUWEN_VOCAB")]
    vocab: PathBuf,
    /// TSV: text and label for PTC, source and target otherwise.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, env = "GUWEN_VOCAB")]
    vocab: PathBuf,
    /// One source per line.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Decoding TOML (strategy, beam_size, max_decode_len, length_penalty).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, conflicts_with = "greedy")]
    beam: Option<usize>,
    #[arg(long)]
    greedy: bool,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    /// bleu1 … bleu9, or accuracy.
    #[arg(long)]
    metric: String,
    #[arg(long)]
    cand: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Full report as TOML.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalSheetsArgs {
    #[arg(long)]
    task: String,
    /// One source per line.
    #[arg(long)]
    sources: PathBuf,
    /// NAME=PATH, one generation per source line. Repeatable.
    #[arg(long = "system", required = true)]
    systems: Vec<String>,
    #[arg(long, default_value_t = 20)]
    items: usize,
    #[arg(long, default_value_t = 10)]
    evaluators: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AggregateArgs {
    /// Sheet files or directories of sheets.
    #[arg(long, required = true, num_args = 1..)]
    sheets: Vec<PathBuf>,
    #[arg(long, required = true, num_args = 1..)]
    key: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReproduceArgs {
    #[arg(long)]
    manifest: PathBuf,
}

/// Invocation context: how to resolve relative paths and what to record.
struct Ctx {
    base: PathBuf,
    /// Subcommand name followed by its arguments, as executed.
    argv: Vec<String>,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let base = match std::env::current_dir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: cannot read the working directory: {e}");
            return EXIT_INTERNAL;
        }
    };
    run_in(&base, &args)
}

/// Like [`run`], resolving relative paths against `base`.
pub fn run_in(base: &Path, args: &[OsString]) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let ctx = Ctx {
        base: base.to_path_buf(),
        argv: args
            .iter()
            .skip(1)
            .map(|a| a.to_string_lossy().into_owned())
            .collect(),
    };
    match execute(cli.command, &ctx) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn execute(command: Command, ctx: &Ctx) -> anyhow::Result<i32> {
    match command {
        Command::Preprocess(a) => commands::preprocess(a, ctx),
        Command::BuildVocab(a) => commands::build_vocab(a, ctx),
        Command::Stats(a) => commands::stats(a, ctx),
        Command::Pretrain(a) => commands::pretrain(a, ctx),
        Command::Finetune(a) => commands::finetune(a, ctx),
        Command::Generate(a) => commands::generate(a, ctx),
        Command::Score(a) => commands::score(a, ctx),
        Command::EvalSheets(a) => commands::eval_sheets(a, ctx),
        Command::Aggregate(a) => commands::aggregate(a, ctx),
        Command::Reproduce(a) => return manifest::reproduce(&ctx.path(&a.manifest)),
    }
    .map(|()| EXIT_OK)
}

/// Maps an error to its exit code by the first recognized cause.
fn exit_code(e: &anyhow::Error) -> i32 {
    use guwen_core::Error as E;
    for cause in e.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(core) = cause.downcast_ref::<E>() {
            return match core {
                E::Dimension { .. }
                | E::Shape(_)
                | E::Axis { .. }
                | E::NonScalarLoss(_)
                | E::LabelRange { .. } => EXIT_INTERNAL,
                _ => EXIT_DATA,
            };
        }
        if cause.is::<std::io::Error>()
            || cause.is::<toml::de::Error>()
            || cause.is::<std::num::ParseIntError>()
        {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}
