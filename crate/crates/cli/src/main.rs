//! `xling`: data generation, pre-training, fine-tuning, decoding, evaluation
//! and ablations on synthetic twin languages.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use xling_core::training::Strategy;

#[derive(Parser)]
#[command(name = "xling", version, about = "Cross-lingual seq2seq pre-training on twin languages")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// TOML run configuration; omitted keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stage1.steps=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Root seed; overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Allow overwriting existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblationKind {
    NoXae,
    NoDae,
    /// Full, no-XAE and no-DAE side by side.
    Objectives,
    Strategies,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Full,
    NoXae,
    NoDae,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::from_name(s).ok_or_else(|| format!("unknown strategy {s:?}; expected one of all, enc, dec, et"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate twin-language corpora, task splits and the vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a vocabulary from whitespace-tokenized text files.
    LearnVocab {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Merge over characters instead of whole words; overrides `vocab.base`.
        #[arg(long)]
        char_base: bool,
    },
    /// Run one pre-training stage.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Directory written by `gen-data`.
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint to start from; required for stage 2.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss trace CSV; defaults to the checkpoint path with a `.csv` extension.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Stage-2 objective mix.
        #[arg(long, value_enum, default_value = "full")]
        variant: VariantArg,
    },
    /// Fine-tune a checkpoint on task examples.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_strategy)]
        strategy: Strategy,
        /// Task examples (JSONL).
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Beam-search decode every manifest entry.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Monolingual corpora whose tokens form the allowed output vocabulary.
        #[arg(long)]
        restrict: Vec<PathBuf>,
    },
    /// Score generated outputs against task references.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        outputs: PathBuf,
        /// Task examples whose targets are the references.
        #[arg(long)]
        refs: PathBuf,
        /// Monolingual corpus defining the language-membership lexicon.
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation matrix end to end and write a side-by-side report.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(value_enum)]
        which: AblationKind,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the root seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
}

/// A failed command and its exit code.
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self {
            code: 1,
            error: e.into(),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common, out } => commands::gen_data(&common, &out),
        Command::LearnVocab {
            common,
            input,
            out,
            char_base,
        } => commands::learn_vocab_cmd(&common, &input, &out, char_base),
        Command::Pretrain {
            common,
            stage,
            data,
            init,
            out,
            trace,
            variant,
        } => commands::pretrain(&common, stage, &data, init.as_deref(), &out, trace.as_deref(), variant),
        Command::Finetune {
            common,
            strategy,
            tasks,
            init,
            out,
            trace,
        } => commands::finetune(&common, strategy, &tasks, &init, &out, trace.as_deref()),
        Command::Generate {
            common,
            checkpoint,
            manifest,
            out,
            restrict,
        } => commands::generate(&common, &checkpoint, &manifest, &out, &restrict),
        Command::Evaluate {
            common,
            outputs,
            refs,
            lexicon,
            out,
        } => commands::evaluate(&common, &outputs, &refs, &lexicon, &out),
        Command::Ablate {
            common,
            which,
            out,
            seeds,
        } => commands::ablate(&common, which, &out, &seeds),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
