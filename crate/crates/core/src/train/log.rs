use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EvalScores;
use crate::error::{Error, Result};
use crate::loss::Stage;
use crate::model::{Architecture, Which};

use super::Strategy;

/// Run metadata, first line of every metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub strategy: Strategy,
    pub architecture: Option<Architecture>,
    /// The trained model for single runs.
    pub which: Option<Which>,
    pub seed: u64,
    pub config_hash: String,
    /// Hashes of the settings that must agree for two runs to be compared,
    /// keyed by field path.
    #[serde(default)]
    pub comparison: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub ce_big: Option<f64>,
    pub ce_small: Option<f64>,
    /// Symmetric KL between the two paths; monitoring only once stage 2 starts.
    pub kl: Option<f64>,
    /// Unscaled balancing loss of the big path.
    pub balancing: Option<f64>,
    pub kl_ema: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub epoch: usize,
    pub which: Which,
    pub bleu: f64,
    pub exact_match: f64,
    pub token_accuracy: f64,
}

impl EvalRecord {
    pub fn new(step: u64, epoch: usize, which: Which, s: &EvalScores) -> Self {
        Self {
            step,
            epoch,
            which,
            bleu: s.bleu,
            exact_match: s.exact_match,
            token_accuracy: s.token_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogRecord {
    Header(Header),
    Update(UpdateRecord),
    Switch {
        step: u64,
        kl_ema: f64,
        t_sep: f64,
    },
    Eval(EvalRecord),
    EpochEnd {
        epoch: usize,
        step: u64,
        kl_ema: Option<f64>,
        t_sep: Option<f64>,
    },
    End {
        step: u64,
        epochs: usize,
        switch_step: Option<u64>,
    },
}

impl LogRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// A parsed metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLog {
    pub header: Header,
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let header = match lines.next() {
            Some((_, l)) => match serde_json::from_str(l) {
                Ok(LogRecord::Header(h)) => h,
                _ => return Err(Error::format(path, "first record is not a header")),
            },
            None => return Err(Error::format(path, "empty metrics log")),
        };
        let mut records = Vec::new();
        for (n, l) in lines {
            let r: LogRecord = serde_json::from_str(l)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            records.push(r);
        }
        Ok(Self { header, records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn updates(&self) -> impl Iterator<Item = &UpdateRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Update(u) => Some(u),
            _ => None,
        })
    }

    pub fn evals(&self) -> impl Iterator<Item = &EvalRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Eval(e) => Some(e),
            _ => None,
        })
    }

    pub fn is_complete(&self) -> bool {
        matches!(self.records.last(), Some(LogRecord::End { .. }))
    }
}

/// Appends records to a line-delimited log file.
pub struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    /// Opens an existing log and keeps only its first `keep` lines.
    pub fn resume(path: &Path, keep: usize) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kept = String::new();
        for line in text.lines().take(keep) {
            kept.push_str(line);
            kept.push('\n');
        }
        if kept.lines().count() != keep {
            return Err(Error::format(path, format!("log holds fewer than {keep} records")));
        }
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn write(&mut self, r: &LogRecord) -> std::io::Result<()> {
        writeln!(self.file, "{}", r.to_line())?;
        self.file.flush()
    }
}
