use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use onestop::analysis::{check_comparable, kl_trajectory, loss_trajectory, summaries_tsv, summarize_run};
use onestop::model::Which;
use onestop::train::{RunLog, Strategy};
use onestop::{Error, Result};

#[derive(Args)]
pub struct AnalyzeArgs {
    /// Metrics logs (metrics.jsonl).
    #[arg(required = true)]
    logs: Vec<PathBuf>,
    /// Trailing moving-average window for loss curves.
    #[arg(long, default_value_t = 20)]
    window: usize,
    /// Loss levels for the time-to-loss table.
    #[arg(long = "threshold", default_values_t = [2.0, 1.0, 0.5])]
    thresholds: Vec<f64>,
    /// Directory for the tables; defaults to the deepest directory holding
    /// every log.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

pub fn run(args: &AnalyzeArgs) -> Result<()> {
    let logs: Vec<RunLog> = args.logs.iter().map(|p| RunLog::read(p)).collect::<Result<_>>()?;
    let out = args.out.clone().unwrap_or_else(|| common_dir(&args.logs));
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut written = Vec::new();
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        written.push(p);
        Ok(())
    };

    let summaries = logs
        .iter()
        .zip(&args.logs)
        .map(|(log, path)| summarize_run(log, wall_time(path)))
        .collect::<Result<Vec<_>>>()?;
    let table = summaries_tsv(&summaries);
    print!("{table}");
    write("summary.tsv", table)?;

    if logs.len() > 1 {
        check_comparable(&logs)?;
        for w in Which::ALL {
            let t = loss_trajectory(&logs, w, args.window, &args.thresholds)?;
            if t.table.columns.is_empty() {
                continue;
            }
            write(&format!("loss.{w}.tsv"), t.table.to_tsv())?;
            write(&format!("time_to_loss.{w}.tsv"), t.time_to_loss_tsv())?;
        }
        let of = |s: Strategy| logs.iter().filter(move |l| l.header.strategy == s).collect::<Vec<_>>();
        if let ([c], [t]) = (of(Strategy::ConstJT).as_slice(), of(Strategy::TSJT).as_slice()) {
            let kl = kl_trajectory(c, t)?;
            match kl.crossover {
                Some(s) => println!("two-stage kl first below constant-constraint kl at update {s}"),
                None => println!("two-stage kl never below constant-constraint kl"),
            }
            write("kl.tsv", kl.table.to_tsv())?;
        }
    }
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(())
}

/// Seconds recorded in the `walltime.json` beside a log, if any.
fn wall_time(log: &Path) -> Option<f64> {
    let p = log.parent()?.join("walltime.json");
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).ok()?).ok()?;
    v["seconds"].as_f64()
}

fn common_dir(paths: &[PathBuf]) -> PathBuf {
    let dirs: Vec<PathBuf> = paths
        .iter()
        .map(|p| p.parent().map_or_else(PathBuf::new, Path::to_path_buf))
        .collect();
    let mut common = dirs[0].clone();
    while !dirs.iter().all(|d| d.starts_with(&common)) {
        if !common.pop() {
            break;
        }
    }
    if common.as_os_str().is_empty() {
        PathBuf::from(".")
    } else {
        common
    }
}
