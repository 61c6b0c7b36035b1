use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use onestop::config::{RunSpec, OUTPUT_ROOT_ENV};
use onestop::data::Corpus;
use onestop::{Error, Result};

mod analyze;
mod evaluate;
mod generate;
mod train;

#[derive(Parser)]
#[command(name = "onestop", version, about = "Train a big and a small translation model at once")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpus described by the spec.
    Generate {
        #[command(flatten)]
        spec: SpecArgs,
        /// Replace an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Train the model described by the spec.
    Train(train::TrainArgs),
    /// Score a checkpoint per language on the test split.
    Evaluate(evaluate::EvaluateArgs),
    /// Summarize and compare metrics logs.
    Analyze(analyze::AnalyzeArgs),
}

#[derive(Args)]
struct SpecArgs {
    /// Run spec (TOML).
    #[arg(long, value_name = "PATH")]
    spec: PathBuf,
    /// Replace `trainer.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl SpecArgs {
    fn load(&self) -> Result<RunSpec> {
        let mut spec = RunSpec::read(&self.spec)?;
        if let Some(s) = self.seed {
            spec.trainer.seed = s;
            spec.validate()?;
        }
        Ok(spec)
    }
}

fn env_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

pub(crate) fn load_corpus(spec: &RunSpec, dir: &Path) -> Result<Corpus> {
    if !dir.join("corpus.json").exists() {
        return Err(Error::config(format!(
            "no corpus at {}; run `onestop generate` first",
            dir.display()
        )));
    }
    let corpus = Corpus::load(dir)?;
    if corpus.config != spec.data {
        return Err(Error::config(format!(
            "the corpus at {} was generated from a different data section",
            dir.display()
        )));
    }
    Ok(corpus)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::Generate { spec, force } => spec.load().and_then(|s| generate::run(&s, *force)),
        Command::Train(a) => train::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::Analyze(a) => analyze::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() || matches!(e, Error::Format { .. }) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
