//! `graft`: command-line access to layer extension, tokenizer expansion,
//! corpus preparation, selective training and the bundled experiments.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "graft", version, about = "Extend small decoder-only transformers with a new language")]
pub struct Cli {
    /// Seed overriding the one in any loaded config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Config file for the subcommand (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file, or output directory for experiments.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a randomly initialized model checkpoint.
    Init {
        /// Print the effective model config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Check or apply a layer-extension plan.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Grow a model's vocabulary to a merged tokenizer, optionally inserting layers too.
    Extend {
        /// Base checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Merged vocabulary file.
        #[arg(long)]
        tok: PathBuf,
        /// Extension plan; without one only the vocabulary grows.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// How new embedding rows are initialized.
        #[arg(long, value_enum, default_value_t = InitKind::Mean)]
        init: InitKind,
        /// Where to write the trainability mask (default: `<out>.mask.toml`).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Train, merge and apply subword vocabularies.
    #[command(subcommand)]
    Tok(TokCommand),
    /// Clean a JSONL document file.
    Clean(CleanArgs),
    /// Interleave anchor-language and new-language documents.
    Mix {
        /// Anchor-language documents (JSONL).
        #[arg(long)]
        anchor: PathBuf,
        /// New-language documents (JSONL).
        #[arg(long)]
        new: PathBuf,
        /// Fraction of emitted documents drawn from the anchor stream.
        #[arg(long, default_value_t = 0.2)]
        phi: f64,
        /// Number of documents to emit.
        #[arg(long)]
        count: usize,
    },
    /// Train a checkpoint on a document file under a trainability mask.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the synthetic bilingual experiments.
    #[command(subcommand)]
    Exp(ExpCommand),
    /// Per-tensor maximum absolute difference between two checkpoints.
    Diff {
        a: PathBuf,
        b: PathBuf,
        /// Only report tensors this mask freezes.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum PlanCommand {
    /// Report every violation in a plan; exits 1 if any is an error.
    Validate {
        #[arg(long)]
        plan: PathBuf,
        /// Also check the plan against this checkpoint's depth.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Insert identity blocks into a checkpoint as the plan describes.
    Apply {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Where to write the trainability mask (default: `<out>.mask.toml`).
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
pub enum TokCommand {
    /// Learn a byte-level vocabulary from a document file.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Target vocabulary size, at least 257.
        #[arg(long)]
        size: usize,
    },
    /// Append a new-language vocabulary to a base vocabulary.
    Merge {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        new: PathBuf,
    },
    /// Print token ids for text given inline or on stdin.
    Encode {
        #[arg(long)]
        tok: PathBuf,
        #[arg(long)]
        text: Option<String>,
    },
    /// Tokens per whitespace-delimited word over a document file.
    Ratio {
        #[arg(long)]
        tok: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
}

#[derive(Args, Debug)]
pub struct CleanArgs {
    /// Input documents (JSONL).
    #[arg(long = "in", required_unless_present = "print_config")]
    pub input: Option<PathBuf>,
    /// Print the effective cleaning config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "print_config")]
    pub model: Option<PathBuf>,
    /// Vocabulary used to encode the documents.
    #[arg(long, required_unless_present = "print_config")]
    pub tok: Option<PathBuf>,
    /// Training documents (JSONL).
    #[arg(long, required_unless_present = "print_config")]
    pub data: Option<PathBuf>,
    /// Trainability mask; everything trains without one.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Where to write the loss curve (TSV).
    #[arg(long)]
    pub curve: Option<PathBuf>,
    /// Print the effective training config and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Subcommand, Debug)]
pub enum EvalCommand {
    /// Perplexity over non-overlapping windows of a document file.
    Ppl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        tok: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 64)]
        window: usize,
    },
}

#[derive(Subcommand, Debug)]
pub enum ExpCommand {
    /// Arms A-D: base, naive full training, extension at two anchor fractions.
    Retention {
        /// Anchor fraction for the extension arm.
        #[arg(long)]
        phi: Option<f64>,
        /// Print the effective experiment config and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Frozen-last, consecutive and distributed insertion on the same data.
    Placement {
        /// Print the effective experiment config and exit.
        #[arg(long)]
        print_config: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum InitKind {
    Mean,
    ZeroHead,
    SmallRandom,
}

/// Failures caused by how the command was invoked rather than by the operation.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
