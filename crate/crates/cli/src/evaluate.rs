use std::path::PathBuf;

use clap::{Args, ValueEnum};
use onestop::data::{evaluate, Smoothing, Split};
use onestop::model::{Archive, CompositeModel, StandaloneModel, Which};
use onestop::train::{Trainee, Trainer};
use onestop::{Error, Result};
use serde_json::json;

use crate::SpecArgs;

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Model or trainer checkpoint; defaults to the run's final model.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Submodel to score: big or small.
    #[arg(long, default_value = "big")]
    which: String,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Comma-separated language names; all languages when absent.
    #[arg(long)]
    languages: Option<String>,
    /// Score a standalone copy of the submodel instead of the composite path.
    #[arg(long)]
    extract: bool,
    #[arg(long, value_enum, default_value = "none")]
    smoothing: SmoothingArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SmoothingArg {
    None,
    Exp,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let which: Which = args.which.parse()?;
    let spec = args.spec.load()?;
    let paths = spec.paths(crate::env_root().as_deref());
    let corpus = crate::load_corpus(&spec, &paths.corpus)?;

    let names: Vec<String> = spec.data.languages.iter().map(|l| l.name.clone()).collect();
    let langs: Vec<usize> = match &args.languages {
        None => (0..names.len()).collect(),
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                names.iter().position(|n| n == s).ok_or_else(|| {
                    Error::config(format!("unknown language {s:?}; the spec defines {}", names.join(", ")))
                })
            })
            .collect::<Result<_>>()?,
    };
    if langs.is_empty() {
        return Err(Error::contract("the language list is empty"));
    }

    let path = args.checkpoint.clone().unwrap_or(paths.model);
    let model = load_model(&path)?;
    if model.architecture() != spec.model.architecture.composite() {
        return Err(Error::config(format!(
            "{} holds a {} model but the spec asks for {}",
            path.display(),
            model.architecture().map_or("single".to_string(), |a| a.to_string()),
            spec.model.architecture
        )));
    }
    let extracted;
    let (net, params) = match &model {
        Trainee::Composite(c) if args.extract => {
            extracted = c.extract(which)?;
            (extracted.network(), &extracted.params)
        }
        m => {
            let net = m.network(which).ok_or_else(|| {
                Error::config(format!(
                    "the checkpoint has no {which} submodel; valid names: {}",
                    m.paths().iter().map(|w| w.name()).collect::<Vec<_>>().join(", ")
                ))
            })?;
            (net, m.params())
        }
    };

    let split = match args.split {
        SplitArg::Valid => Split::Valid,
        SplitArg::Test => Split::Test,
    };
    let smoothing = match args.smoothing {
        SmoothingArg::None => Smoothing::None,
        SmoothingArg::Exp => Smoothing::Exp,
    };
    let mut rows = Vec::new();
    for &li in &langs {
        let pairs = corpus.language_pairs(split, li);
        let s = evaluate(net, params, &pairs, smoothing)?;
        rows.push(s);
        println!(
            "{}",
            json!({
                "language": names[li],
                "which": which,
                "split": split.name(),
                "bleu": s.bleu,
                "exact_match": s.exact_match,
                "token_accuracy": s.token_accuracy,
                "sentences": s.sentences,
            })
        );
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&onestop::data::EvalScores) -> f64| rows.iter().map(f).sum::<f64>() / n;
    println!(
        "{}",
        json!({
            "language": "macro",
            "which": which,
            "split": split.name(),
            "bleu": mean(|s| s.bleu),
            "exact_match": mean(|s| s.exact_match),
            "token_accuracy": mean(|s| s.token_accuracy),
            "sentences": rows.iter().map(|s| s.sentences).sum::<usize>(),
        })
    );
    Ok(())
}

fn load_model(path: &std::path::Path) -> Result<Trainee> {
    let a = Archive::read(path)?;
    match a.manifest.get("kind").and_then(|k| k.as_str()) {
        Some("trainer") => Ok(Trainer::from_archive(&a, path)?.into_model()),
        Some("composite") => Ok(Trainee::Composite(CompositeModel::from_archive(&a, path)?)),
        Some("standalone") => Ok(Trainee::Single(StandaloneModel::from_archive(&a, path)?)),
        _ => Err(Error::format(path, "unknown checkpoint kind")),
    }
}
