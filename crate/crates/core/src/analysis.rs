//! Plot-ready tables from metrics logs: smoothed loss curves, time-to-loss,
//! KL curves and per-run summaries.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Stage;
use crate::model::Which;
use crate::train::{LogRecord, RunLog, Strategy};

/// Trailing moving average; the first `window - 1` outputs average over the
/// values available so far.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..values.len())
        .map(|i| {
            let win = &values[(i + 1).saturating_sub(w)..=i];
            win.iter().sum::<f64>() / win.len() as f64
        })
        .collect()
}

/// First step whose value is at or below `threshold`.
pub fn time_to_loss(steps: &[u64], values: &[f64], threshold: f64) -> Option<u64> {
    steps
        .iter()
        .zip(values)
        .find(|(_, &v)| v <= threshold)
        .map(|(&s, _)| s)
}

/// Checks the ordering invariants of a log: strictly increasing update steps
/// and stages that never go back.
pub fn check_log(log: &RunLog) -> Result<()> {
    let mut last: Option<(u64, Stage)> = None;
    for u in log.updates() {
        if let Some((s, st)) = last {
            if u.step <= s {
                return Err(Error::contract(format!("update steps not increasing at step {}", u.step)));
            }
            if u.stage < st {
                return Err(Error::contract(format!("stage goes back at step {}", u.step)));
            }
        }
        last = Some((u.step, u.stage));
    }
    Ok(())
}

/// Curve label of a run: the strategy, or `single-{which}` for single runs.
pub fn label(log: &RunLog) -> String {
    match (log.header.strategy, log.header.which) {
        (Strategy::Single, Some(w)) => format!("single-{w}"),
        (s, _) => s.to_string(),
    }
}

fn unique_labels(logs: &[RunLog]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    logs.iter()
        .map(|l| {
            let base = label(l);
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}#{n}")
            }
        })
        .collect()
}

/// Fails with the first differing field when two runs were not set up
/// alike.
pub fn check_comparable(logs: &[RunLog]) -> Result<()> {
    let Some(first) = logs.first() else {
        return Err(Error::contract("no logs given"));
    };
    for l in &logs[1..] {
        let (a, b) = (&first.header.comparison, &l.header.comparison);
        let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
        for k in keys {
            if a.get(k) != b.get(k) {
                return Err(Error::contract(format!(
                    "logs differ in {k}: {} vs {}",
                    a.get(k).map_or("(absent)", String::as_str),
                    b.get(k).map_or("(absent)", String::as_str)
                )));
            }
        }
    }
    Ok(())
}

/// A table with a step column and one column per curve; missing values are
/// `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveTable {
    pub steps: Vec<u64>,
    pub columns: Vec<(String, Vec<Option<f64>>)>,
}

impl CurveTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("step");
        for (name, _) in &self.columns {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        for (i, s) in self.steps.iter().enumerate() {
            out.push_str(&s.to_string());
            for (_, col) in &self.columns {
                out.push('\t');
                if let Some(v) = col[i] {
                    out.push_str(&v.to_string());
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<&[Option<f64>]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, c)| c.as_slice())
    }
}

fn series(log: &RunLog, f: impl Fn(&crate::train::UpdateRecord) -> Option<f64>) -> Option<(Vec<u64>, Vec<f64>)> {
    let mut steps = Vec::new();
    let mut vals = Vec::new();
    for u in log.updates() {
        steps.push(u.step);
        vals.push(f(u)?);
    }
    (!steps.is_empty()).then_some((steps, vals))
}

fn ce(which: Which) -> impl Fn(&crate::train::UpdateRecord) -> Option<f64> {
    move |u| match which {
        Which::Big => u.ce_big,
        Which::Small => u.ce_small,
    }
}

/// Smoothed cross-entropy curves of one submodel across runs, aligned on the
/// update steps common to every run that trains it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub which: Which,
    pub table: CurveTable,
    /// `(label, threshold, first step at or below it)`
    pub time_to_loss: Vec<(String, f64, Option<u64>)>,
}

impl Trajectory {
    pub fn time_to_loss_tsv(&self) -> String {
        let mut out = String::from("curve\tthreshold\tstep\n");
        for (l, t, s) in &self.time_to_loss {
            out.push_str(&format!("{l}\t{t}\t{}\n", s.map_or(String::new(), |s| s.to_string())));
        }
        out
    }
}

pub fn loss_trajectory(logs: &[RunLog], which: Which, window: usize, thresholds: &[f64]) -> Result<Trajectory> {
    check_comparable(logs)?;
    let labels = unique_labels(logs);
    let mut curves = Vec::new();
    for (log, label) in logs.iter().zip(&labels) {
        check_log(log)?;
        if let Some((steps, vals)) = series(log, ce(which)) {
            curves.push((label.clone(), steps, smooth(&vals, window)));
        }
    }
    let table = align(&curves);
    let mut ttl = Vec::new();
    for (label, steps, vals) in &curves {
        for &t in thresholds {
            ttl.push((label.clone(), t, time_to_loss(steps, vals, t)));
        }
    }
    Ok(Trajectory {
        which,
        table,
        time_to_loss: ttl,
    })
}

fn align(curves: &[(String, Vec<u64>, Vec<f64>)]) -> CurveTable {
    let mut common: Option<BTreeSet<u64>> = None;
    for (_, steps, _) in curves {
        let s: BTreeSet<u64> = steps.iter().copied().collect();
        common = Some(match common {
            None => s,
            Some(c) => c.intersection(&s).copied().collect(),
        });
    }
    let steps: Vec<u64> = common.unwrap_or_default().into_iter().collect();
    let columns = curves
        .iter()
        .map(|(label, s, v)| {
            let by_step: BTreeMap<u64, f64> = s.iter().copied().zip(v.iter().copied()).collect();
            (label.clone(), steps.iter().map(|k| by_step.get(k).copied()).collect())
        })
        .collect();
    CurveTable { steps, columns }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlTrajectory {
    pub table: CurveTable,
    /// First common step where the two-stage run's KL is below the
    /// constant-constraint run's.
    pub crossover: Option<u64>,
}

pub fn kl_trajectory(constjt: &RunLog, tsjt: &RunLog) -> Result<KlTrajectory> {
    check_comparable(&[constjt.clone(), tsjt.clone()])?;
    let get = |log: &RunLog, name: &str| {
        series(log, |u| u.kl).ok_or_else(|| Error::contract(format!("{name} log has no kl column")))
    };
    let (cs, cv) = get(constjt, "constjt")?;
    let (ts, tv) = get(tsjt, "tsjt")?;
    let table = align(&[("constjt".into(), cs, cv), ("tsjt".into(), ts, tv)]);
    let (c, t) = (&table.columns[0].1, &table.columns[1].1);
    let crossover = table
        .steps
        .iter()
        .enumerate()
        .find(|&(i, _)| t[i] < c[i])
        .map(|(_, &s)| s);
    Ok(KlTrajectory { table, crossover })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub updates: u64,
    pub final_ce_big: Option<f64>,
    pub final_ce_small: Option<f64>,
    pub switch_step: Option<u64>,
    pub best_valid_bleu_big: Option<f64>,
    pub best_valid_bleu_small: Option<f64>,
    pub wall_time_secs: Option<f64>,
}

pub fn summarize_run(log: &RunLog, wall_time_secs: Option<f64>) -> Result<RunSummary> {
    check_log(log)?;
    if !log.is_complete() {
        let last = log.updates().last().map_or(0, |u| u.step);
        return Err(Error::contract(format!("log is truncated; last valid step {last}")));
    }
    let last = log.updates().last();
    let switch_step = log.records.iter().find_map(|r| match r {
        LogRecord::Switch { step, .. } => Some(*step),
        _ => None,
    });
    let best = |w: Which| {
        log.evals()
            .filter(|e| e.which == w)
            .map(|e| e.bleu)
            .fold(None, |m: Option<f64>, b| Some(m.map_or(b, |m| m.max(b))))
    };
    Ok(RunSummary {
        label: label(log),
        seed: log.header.seed,
        config_hash: log.header.config_hash.clone(),
        updates: last.map_or(0, |u| u.step),
        final_ce_big: last.and_then(|u| u.ce_big),
        final_ce_small: last.and_then(|u| u.ce_small),
        switch_step,
        best_valid_bleu_big: best(Which::Big),
        best_valid_bleu_small: best(Which::Small),
        wall_time_secs,
    })
}

pub fn summaries_tsv(rows: &[RunSummary]) -> String {
    let f = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut out = String::from(
        "run\tseed\tupdates\tfinal_ce_big\tfinal_ce_small\tswitch_step\tbest_valid_bleu_big\tbest_valid_bleu_small\twall_time_secs\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.label,
            r.seed,
            r.updates,
            f(r.final_ce_big),
            f(r.final_ce_small),
            r.switch_step.map_or(String::new(), |s| s.to_string()),
            f(r.best_valid_bleu_big),
            f(r.best_valid_bleu_small),
            f(r.wall_time_secs)
        ));
    }
    out
}
