mod commands;
mod config;
mod manifest;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Text-line recognition with parsimonious HMMs and writer-aware
/// convolutional frame classifiers.
///
/// Every subcommand reads and writes fixed file names inside the work
/// directory and records a manifest under `<work>/manifests/`. Settings
/// come from built-in defaults, then `--config`, then `PHMM_SECTION__KEY`
/// environment variables (e.g. `PHMM_DECODE__LM_SCALE=0.8`), then flags.
#[derive(Debug, Parser)]
#[command(name = "phmm", version)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Work directory holding every artifact.
    #[arg(long, global = true, default_value = "work")]
    pub work: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    /// Master seed (default 1).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PartitionArg {
    Train,
    Adapt,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Scorer {
    Gmm,
    Nn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LmArg {
    None,
    Ngram,
    Hybrid,
}

/// Decoder flags shared by `decode` and `multipass`.
#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// Tokens kept per frame, or `inf` for exact search (default 2000).
    #[arg(long)]
    pub beam: Option<String>,
    /// Weight of LM log-probabilities (default 1.0).
    #[arg(long)]
    pub lm_scale: Option<f64>,
    /// Added per hypothesized character (default 0.0).
    #[arg(long)]
    pub ins_penalty: Option<f64>,
    /// Language model in the search (default none).
    #[arg(long, value_enum)]
    pub lm: Option<LmArg>,
    /// Size of the written n-best list (default 1).
    #[arg(long)]
    pub nbest: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic handwriting corpus into `<work>/corpus`.
    Synth {
        /// Character classes (default 20).
        #[arg(long)]
        alphabet_size: Option<usize>,
    },
    /// Write `<work>/features/<partition>.features.bin` for every partition.
    Extract,
    /// Train untied GMM-HMMs on the training partition: `gmmhmm.bin`.
    TrainGmm {
        /// Emitting states per character (default 5).
        #[arg(long)]
        num_states: Option<usize>,
    },
    /// Forced-align the training partition with `gmmhmm.bin`: `align.tsv`.
    Align,
    /// Generate per-position question sets: `questions.tsv`.
    Questions,
    /// Build the tied-state map and tied GMM-HMMs: `tying.tsv`, `tied.gmmhmm.bin`.
    Tie {
        /// Average tied states per character (default 3).
        #[arg(long)]
        avg_states: Option<f64>,
    },
    /// Train the writer-independent classifier: `wcnn.base.bin`.
    TrainNn,
    /// Train adaptation matrices and training-writer codes: `wcnn.bin`, `codes.csv`.
    TrainAdapt,
    /// Train the N-gram (`lm.arpa`) and optionally the recurrent LM (`rnnlm.bin`).
    TrainLm {
        #[arg(long)]
        rnn: bool,
    },
    /// Decode a partition into `<work>/decode`.
    Decode {
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
        #[arg(long, value_enum, default_value = "nn")]
        scorer: Scorer,
        /// Classifier to score with (default `<work>/wcnn.bin`).
        #[arg(long)]
        wcnn: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Alternate unsupervised writer adaptation and decoding: `<work>/multipass`.
    Multipass {
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
        /// Decoding passes (default 3).
        #[arg(long)]
        passes: Option<usize>,
        #[arg(long)]
        wcnn: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Score a hypothesis file: `<work>/eval`.
    Eval {
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
        /// Hypotheses (default `<work>/decode/hyp.tsv`).
        #[arg(long)]
        hyp: Option<PathBuf>,
    },
    /// Render the grown tying trees as Graphviz: `<work>/trees/position<p>.dot`.
    ExportTree {
        /// Only this position.
        #[arg(long)]
        position: Option<usize>,
    },
    /// Write the training-writer codes of a classifier as CSV.
    ExportCodes {
        #[arg(long)]
        wcnn: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build_global()?;
    commands::run(cli)
}
