use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;
mod dump;

#[derive(Debug, Parser)]
#[command(
    name = "vokenizer",
    version,
    about = "Assign images to the tokens of a text corpus"
)]
pub struct Cli {
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Flat key=value file of default flag values; explicit flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Corpus statistics against a reference corpus, as one JSON line.
    Stats(StatsArgs),
    /// Train the token-image matcher on caption pairs.
    TrainMatcher(TrainArgs),
    /// Project the image features into the voken vocabulary.
    BuildIndex(BuildIndexArgs),
    /// Assign every corpus token its most relevant image.
    Vokenize(VokenizeArgs),
    /// Transfer a voken file to another tokenization of the same corpus.
    Revokenize(RevokenizeArgs),
    /// Produce labels with a non-contextual strategy or an ablation.
    Baseline(BaselineArgs),
    /// Evaluate voken-classification and masked-LM losses of model outputs.
    EvalLoss(EvalLossArgs),
    /// Print a voken file next to its tokens for inspection.
    Dump(DumpArgs),
}

#[derive(Debug, Args)]
pub struct TokenizerArgs {
    /// Tokenizer id: `whitespace`, `basic`, or an id registered with --wordpiece.
    #[arg(long, default_value = "basic")]
    pub tokenizer: String,

    /// Register a WordPiece tokenizer as ID=VOCAB_PATH (repeatable).
    #[arg(long, value_name = "ID=PATH")]
    pub wordpiece: Vec<String>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("grounding").required(true).args(["grounded", "captions"])))]
pub struct StatsArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Grounded token set, one type per line.
    #[arg(long)]
    pub grounded: Option<PathBuf>,
    /// Caption corpus to derive the grounded set from.
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Occurrence count a caption type must exceed to count as grounded.
    #[arg(long, default_value_t = voken::stats::DEFAULT_GROUNDING_THRESHOLD)]
    pub threshold: u64,
    /// Stop-word list, one per line (default: bundled English list).
    #[arg(long)]
    pub stopwords: Option<PathBuf>,
    /// Write the derived grounded set here.
    #[arg(long, requires = "captions")]
    pub write_grounded: Option<PathBuf>,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Token,
    Sentence,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Caption corpus, one caption per line.
    #[arg(long)]
    pub captions: PathBuf,
    /// Caption pairs: sentence_id<TAB>image_id.
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Token features (token mode) or per-sentence features (sentence mode).
    #[arg(long)]
    pub text_features: PathBuf,
    #[arg(long)]
    pub image_features: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "token")]
    pub mode: Mode,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = voken::matcher::DEFAULT_MARGIN)]
    pub margin: f64,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub image_features: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output feature file of projected unit vectors, one row per voken id.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VokenizeArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// One row per corpus token, in corpus order.
    #[arg(long)]
    pub token_features: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Vocabulary written by build-index.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct RevokenizeArgs {
    #[arg(long)]
    pub vokens: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Tokenizer the voken file was produced with.
    #[arg(long)]
    pub from: String,
    /// Tokenizer to transfer to.
    #[arg(long)]
    pub to: String,
    #[arg(long, value_name = "ID=PATH")]
    pub wordpiece: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineKind {
    /// Sample from the Boltzmann distribution of caption term frequencies.
    Tf,
    /// One retrieved image per sentence.
    Sentence,
    /// The sentence image copied to every token.
    Propagated,
    /// Uniformly random vokens.
    Random,
    /// Vokens of an existing file permuted within batches of sentences.
    Shuffle,
    /// One fixed voken per token type.
    Tokens,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub kind: BaselineKind,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Caption corpus (tf).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Caption pairs (tf).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Image manifest (tf; vocabulary size for random and tokens).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Boltzmann temperature (tf).
    #[arg(long, default_value_t = voken::baselines::DEFAULT_TEMPERATURE)]
    pub gamma: f64,
    /// Per-sentence features (sentence, propagated).
    #[arg(long)]
    pub sentence_features: Option<PathBuf>,
    /// Sentence-mode checkpoint (sentence, propagated).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary from build-index (sentence, propagated).
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Voken file to shuffle (shuffle).
    #[arg(long)]
    pub vokens: Option<PathBuf>,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Args)]
pub struct EvalLossArgs {
    /// Reference vokens, one record per sentence.
    #[arg(long)]
    pub vokens: PathBuf,
    /// Predicted voken distributions, one probability row per token.
    #[arg(long)]
    pub voken_probs: PathBuf,
    /// Predicted token distributions for masked-LM evaluation, one row per token.
    #[arg(long, requires_all = ["corpus", "seed"])]
    pub mlm_probs: Option<PathBuf>,
    /// Corpus whose token ids are the masked-LM targets.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Seed of the masking draw.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = voken::supervision::DEFAULT_MASK_RATIO)]
    pub mask_ratio: f64,
    #[arg(long, default_value_t = voken::supervision::DEFAULT_LAMBDA)]
    pub lambda: f64,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DumpFormat {
    Html,
    Tsv,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub vokens: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: DumpFormat,
    /// Output path (default: standard output).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recompute scores from these token features (needs --checkpoint and --index).
    #[arg(long, requires_all = ["checkpoint", "index"])]
    pub token_features: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Only the first N sentences.
    #[arg(long)]
    pub limit: Option<usize>,
    #[command(flatten)]
    pub tok: TokenizerArgs,
}

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match config::merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(1);
        }
    };
    let cli = Cli::parse_from(argv);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
