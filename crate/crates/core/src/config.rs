//! Declarative run description shared by every command.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, CompositeModel, Layout, SharedDepth, StandaloneModel, Which};
use crate::nn::ModelConfig;
use crate::sha256_hex;
use crate::train::{Header, Strategy, Trainee, TrainerConfig};

/// Environment variable that replaces `output.root` when set.
pub const OUTPUT_ROOT_ENV: &str = "ONESTOP_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchitectureChoice {
    Shared,
    Indep,
    /// Single-model runs.
    None,
}

impl ArchitectureChoice {
    pub fn composite(self) -> Option<Architecture> {
        match self {
            ArchitectureChoice::Shared => Some(Architecture::Shared),
            ArchitectureChoice::Indep => Some(Architecture::Indep),
            ArchitectureChoice::None => None,
        }
    }
}

impl fmt::Display for ArchitectureChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchitectureChoice::Shared => "shared",
            ArchitectureChoice::Indep => "indep",
            ArchitectureChoice::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ArchitectureChoice,
    #[serde(default)]
    pub shared_depth: SharedDepth,
    pub big: ModelConfig,
    /// Required for shared; defaults to the halved big model otherwise.
    #[serde(default)]
    pub small: Option<ModelConfig>,
}

impl ModelSection {
    pub fn small_config(&self) -> ModelConfig {
        self.small.clone().unwrap_or_else(|| self.big.halved())
    }
}

fn default_root() -> PathBuf {
    PathBuf::from("runs")
}

fn default_corpus() -> PathBuf {
    PathBuf::from("corpus")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_root")]
    pub root: PathBuf,
    /// Corpus directory, relative to the root.
    #[serde(default = "default_corpus")]
    pub corpus: PathBuf,
    /// Run directory stem; derived from strategy and architecture when
    /// absent. The seed is always appended.
    #[serde(default)]
    pub run: Option<String>,
    #[serde(default)]
    pub checkpoint_every: Option<u64>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            root: default_root(),
            corpus: default_corpus(),
            run: None,
            checkpoint_every: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub model: ModelSection,
    pub trainer: TrainerConfig,
    pub data: CorpusConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// Files a run reads and writes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunPaths {
    pub corpus: PathBuf,
    pub run: PathBuf,
    pub log: PathBuf,
    pub trainer: PathBuf,
    pub model: PathBuf,
    pub walltime: PathBuf,
}

impl RunSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Checks every section and their agreement, without building anything.
    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        m.big.validate().map_err(|e| prefix("model.big", e))?;
        if let Some(s) = &m.small {
            s.validate().map_err(|e| prefix("model.small", e))?;
        }
        self.trainer.validate()?;
        self.data.validate().map_err(|e| prefix("data", e))?;
        let small = m.small_config();
        for (name, c) in [("model.big", &m.big), ("model.small", &small)] {
            if c.vocab_size != self.data.vocab_size {
                return Err(Error::config(format!(
                    "{name}.vocab_size {} differs from data.vocab_size {}",
                    c.vocab_size, self.data.vocab_size
                )));
            }
        }
        match (self.trainer.strategy, m.architecture) {
            (Strategy::Single, ArchitectureChoice::None) => {}
            (Strategy::Single, a) => {
                return Err(Error::config(format!(
                    "strategy single trains one model; model.architecture must be \"none\", not \"{a}\""
                )))
            }
            (s, ArchitectureChoice::None) => {
                return Err(Error::config(format!(
                    "strategy {s} needs model.architecture \"shared\" or \"indep\""
                )))
            }
            (_, ArchitectureChoice::Shared) => {
                if m.small.is_none() {
                    return Err(Error::config("model.small is required for the shared architecture"));
                }
                Layout::shared(&m.big, &small, m.shared_depth)?;
            }
            (_, ArchitectureChoice::Indep) => {
                Layout::indep(&m.big, Some(&small))?;
            }
        }
        if self.output.checkpoint_every == Some(0) {
            return Err(Error::config("output.checkpoint_every must be at least 1"));
        }
        if let Some(r) = &self.output.run {
            if r.is_empty() || r.contains(['/', '\\']) || r == "." || r == ".." {
                return Err(Error::config(format!("output.run {r:?} is not a plain directory name")));
            }
        }
        Ok(())
    }

    /// Builds the model the trainer section asks for, seeded by
    /// `trainer.seed`.
    pub fn build_trainee(&self) -> Result<Trainee> {
        let m = &self.model;
        let seed = self.trainer.seed;
        let small = m.small_config();
        Ok(match m.architecture {
            ArchitectureChoice::None => {
                let which = self.trainer.single_target;
                let cfg = match which {
                    Which::Big => &m.big,
                    Which::Small => &small,
                };
                Trainee::Single(StandaloneModel::new(cfg, which, seed)?)
            }
            ArchitectureChoice::Shared => {
                Trainee::Composite(CompositeModel::build(Layout::shared(&m.big, &small, m.shared_depth)?, seed)?)
            }
            ArchitectureChoice::Indep => {
                Trainee::Composite(CompositeModel::build(Layout::indep(&m.big, Some(&small))?, seed)?)
            }
        })
    }

    /// The semantic content: everything except the output section, with
    /// defaults spelled out.
    fn semantic(&self) -> Value {
        serde_json::json!({
            "model": self.model,
            "trainer": self.trainer,
            "data": self.data,
        })
    }

    /// SHA-256 of the canonical JSON of the semantic sections.
    pub fn config_hash(&self) -> String {
        sha256_hex(canonical(&self.semantic()).as_bytes())
    }

    /// Settings that must agree between runs whose curves are compared:
    /// the data and the shared training schedule, flattened to
    /// `path → value`.
    pub fn comparison_fields(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        let mut trainer = serde_json::to_value(&self.trainer).expect("trainer serializes");
        if let Value::Object(map) = &mut trainer {
            for k in ["strategy", "t_sep", "alpha_big", "alpha_small", "single_target", "kl_ema_decay", "switch_check_interval"] {
                map.remove(k);
            }
        }
        flatten("trainer", &trainer, &mut out);
        flatten("data", &serde_json::to_value(&self.data).expect("data serializes"), &mut out);
        out
    }

    /// First line of the run's metrics log.
    pub fn header(&self) -> Header {
        let t = &self.trainer;
        Header {
            strategy: t.strategy,
            architecture: self.model.architecture.composite(),
            which: (t.strategy == Strategy::Single).then_some(t.single_target),
            seed: t.seed,
            config_hash: self.config_hash(),
            comparison: self.comparison_fields(),
        }
    }

    /// Run directory name: `output.run` (or a stem derived from strategy and
    /// architecture) followed by the seed.
    pub fn run_name(&self) -> String {
        let t = &self.trainer;
        let stem = self.output.run.clone().unwrap_or_else(|| match self.model.architecture {
            ArchitectureChoice::None => format!("single-{}", t.single_target),
            a => format!("{}-{a}", t.strategy),
        });
        format!("{stem}-seed{}", t.seed)
    }

    /// Resolves output paths. `env_root` (from [`OUTPUT_ROOT_ENV`]) replaces
    /// `output.root` when given.
    pub fn paths(&self, env_root: Option<&Path>) -> RunPaths {
        let root = env_root.map_or_else(|| self.output.root.clone(), Path::to_path_buf);
        let run = root.join(self.run_name());
        RunPaths {
            corpus: root.join(&self.output.corpus),
            log: run.join("metrics.jsonl"),
            trainer: run.join("trainer.ckpt"),
            model: run.join("model.ckpt"),
            walltime: run.join("walltime.json"),
            run,
        }
    }
}

fn prefix(section: &str, e: Error) -> Error {
    match e {
        Error::Config(m) => Error::config(format!("{section}: {m}")),
        other => other,
    }
}

/// JSON with object keys sorted at every level and no whitespace.
pub fn canonical(v: &Value) -> String {
    // serde_json's map is ordered by key unless `preserve_order` is enabled.
    serde_json::to_string(v).expect("json serializes")
}

fn flatten(path: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, x) in m {
                flatten(&format!("{path}.{k}"), x, out);
            }
        }
        Value::Array(a) => {
            for (i, x) in a.iter().enumerate() {
                flatten(&format!("{path}[{i}]"), x, out);
            }
        }
        other => {
            out.insert(path.to_string(), other.to_string());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SPEC: &str = r#"
[model]
architecture = "shared"

[model.big]
vocab_size = 32
d_model = 8
heads = 2
ffn_size = 16
encoder_layers = 2
decoder_layers = 2
moe = { experts = 2, expert_ffn = 16 }

[model.small]
vocab_size = 32
d_model = 8
heads = 2
ffn_size = 16
encoder_layers = 1
decoder_layers = 1

[trainer]
strategy = "tsjt"
seed = 3

[data]
vocab_size = 32
min_len = 2
max_len = 5
seed = 1
tiers = { high = 40, medium = 20, low = 10 }
valid_per_language = 4
test_per_language = 4
languages = [
  { name = "fr", tier = "high", transform = { kind = "cyclic-substitution", key = 7 } },
  { name = "fi", tier = "medium", transform = { kind = "reverse" } },
]
"#;

    #[test]
    fn parse_round_trip_and_hash() {
        let s = RunSpec::from_toml(SPEC).unwrap();
        let again = RunSpec::from_toml(&s.to_toml()).unwrap();
        assert_eq!(again, s);
        assert_eq!(again.config_hash(), s.config_hash());
        let mut t = s.clone();
        t.trainer.peak_lr *= 2.0;
        assert_ne!(t.config_hash(), s.config_hash());
        let mut o = s.clone();
        o.output.run = Some("x".into());
        assert_eq!(o.config_hash(), s.config_hash());
    }

    #[test]
    fn unknown_and_missing_keys() {
        let err = RunSpec::from_toml(&SPEC.replace("[trainer]", "[trainer]\nbogus = 1")).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let cut = &SPEC[..SPEC.find("[data]").unwrap()];
        let err = RunSpec::from_toml(cut).unwrap_err();
        assert!(err.to_string().contains("data"), "{err}");
    }

    #[test]
    fn strategy_architecture_pairing() {
        let err = RunSpec::from_toml(&SPEC.replace("\"tsjt\"", "\"single\"")).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let single = SPEC
            .replace("\"tsjt\"", "\"single\"")
            .replace("architecture = \"shared\"", "architecture = \"none\"");
        let s = RunSpec::from_toml(&single).unwrap();
        assert!(matches!(s.build_trainee().unwrap(), Trainee::Single(_)));
        let err = RunSpec::from_toml(&SPEC.replace("vocab_size = 32\nmin_len", "vocab_size = 40\nmin_len")).unwrap_err();
        assert!(err.to_string().contains("vocab_size"));
    }

    #[test]
    fn paths_honor_root_override() {
        let s = RunSpec::from_toml(SPEC).unwrap();
        let p = s.paths(None);
        assert_eq!(p.log, PathBuf::from("runs/tsjt-shared-seed3/metrics.jsonl"));
        let q = s.paths(Some(Path::new("/tmp/x")));
        assert_eq!(q.corpus, PathBuf::from("/tmp/x/corpus"));
    }

    #[test]
    fn comparison_ignores_strategy() {
        let a = RunSpec::from_toml(SPEC).unwrap();
        let mut b = a.clone();
        b.trainer.strategy = Strategy::ConstJT;
        assert_eq!(a.comparison_fields(), b.comparison_fields());
        b.trainer.warmup_steps += 1;
        assert_ne!(a.comparison_fields(), b.comparison_fields());
    }
}
