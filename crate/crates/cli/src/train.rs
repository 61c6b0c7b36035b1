use std::fs;
use std::path::Path;
use std::time::Instant;

use clap::Args;
use onestop::config::{ArchitectureChoice, RunPaths, RunSpec};
use onestop::model::{Layout, Submodel, Which};
use onestop::train::{LogRecord, LogWriter, RunOptions, RunOutcome, Trainer};
use onestop::{Error, Result};
use serde_json::json;

use crate::SpecArgs;

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Discard an existing run with the same name.
    #[arg(long)]
    force: bool,
    /// Continue from the run's trainer checkpoint.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Print parameter counts and exit.
    #[arg(long)]
    dry_run: bool,
    /// Checkpoint and stop after this many updates, as if interrupted.
    #[arg(long, hide = true)]
    stop_after: Option<u64>,
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let spec = args.spec.load()?;
    if args.dry_run {
        return dry_run(&spec);
    }
    let paths = spec.paths(crate::env_root().as_deref());
    let corpus = crate::load_corpus(&spec, &paths.corpus)?;

    let (mut trainer, mut log, prior_secs) = if args.resume {
        resume(&spec, &paths)?
    } else {
        fresh(&spec, &paths, args.force)?
    };

    let start = Instant::now();
    let opts = RunOptions {
        valid: Some(&corpus.valid),
        checkpoint: Some(&paths.trainer),
        checkpoint_every: spec.output.checkpoint_every,
        stop_after: args.stop_after,
    };
    let result = trainer.run(&corpus.train, &opts, &mut |r| {
        log.write(r).map_err(|e| Error::io(&paths.log, e))
    });
    let secs = prior_secs + start.elapsed().as_secs_f64();
    write_json(&paths.walltime, &json!({ "seconds": secs }))?;
    if let RunOutcome::Stopped = result? {
        return Err(Error::Interrupted(format!(
            "stopped at update {}; continue with --resume",
            trainer.state().step
        )));
    }

    trainer.model().to_archive().write(&paths.model)?;
    let st = trainer.state();
    println!("run {}", paths.run.display());
    println!("updates {} epochs {}", st.step, st.epoch);
    if let Some(s) = st.control.switch_step {
        println!("switched to stage 2 at update {s}");
    }
    Ok(())
}

fn fresh(spec: &RunSpec, paths: &RunPaths, force: bool) -> Result<(Trainer, LogWriter, f64)> {
    if paths.run.exists() {
        if !force {
            return Err(Error::config(format!(
                "{} already exists; pass --force to replace it or --resume to continue",
                paths.run.display()
            )));
        }
        fs::remove_dir_all(&paths.run).map_err(|e| Error::io(&paths.run, e))?;
    }
    let trainer = Trainer::new(spec.trainer.clone(), spec.build_trainee()?)?;
    let mut log = LogWriter::create(&paths.log)?;
    log.write(&LogRecord::Header(spec.header()))
        .map_err(|e| Error::io(&paths.log, e))?;
    let spec_path = paths.run.join("spec.toml");
    fs::write(&spec_path, spec.to_toml()).map_err(|e| Error::io(&spec_path, e))?;
    Ok((trainer, log, 0.0))
}

fn resume(spec: &RunSpec, paths: &RunPaths) -> Result<(Trainer, LogWriter, f64)> {
    if !paths.trainer.exists() {
        return Err(Error::config(format!("nothing to resume: {} is missing", paths.trainer.display())));
    }
    let text = fs::read_to_string(&paths.log).map_err(|e| Error::io(&paths.log, e))?;
    let first = text.lines().next().unwrap_or_default();
    match serde_json::from_str::<LogRecord>(first) {
        Ok(LogRecord::Header(h)) if h.config_hash == spec.config_hash() => {}
        Ok(LogRecord::Header(_)) => {
            return Err(Error::config(format!(
                "{} was written by a different spec",
                paths.log.display()
            )))
        }
        _ => return Err(Error::format(&paths.log, "first line is not a header")),
    }
    let trainer = Trainer::load(&paths.trainer)?;
    if trainer.config() != &spec.trainer {
        return Err(Error::config("the checkpoint was trained with a different trainer section"));
    }
    let log = LogWriter::resume(&paths.log, 1 + trainer.state().records as usize)?;
    let prior = fs::read_to_string(&paths.walltime)
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["seconds"].as_f64())
        .unwrap_or(0.0);
    Ok((trainer, log, prior))
}

fn dry_run(spec: &RunSpec) -> Result<()> {
    let m = &spec.model;
    let small = m.small_config();
    println!("architecture\t{}", m.architecture);
    match m.architecture {
        ArchitectureChoice::None => {
            let which = spec.trainer.single_target;
            let cfg = if which == Which::Big { &m.big } else { &small };
            let sub = Submodel::standalone(cfg, which)?;
            println!("submodel\t{which}\t{}", sub.network.param_count());
            println!("total\t{}", sub.network.param_count());
        }
        ArchitectureChoice::Shared | ArchitectureChoice::Indep => {
            let layout = if m.architecture == ArchitectureChoice::Shared {
                Layout::shared(&m.big, &small, m.shared_depth)?
            } else {
                Layout::indep(&m.big, Some(&small))?
            };
            for w in Which::ALL {
                println!("submodel\t{w}\t{}", layout.submodel(w).network.param_count());
            }
            let parts = layout.partition_sizes();
            for (o, n) in &parts {
                println!("partition\t{o}\t{n}");
            }
            println!("total\t{}", parts.values().sum::<usize>());
        }
    }
    Ok(())
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("json serializes") + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
