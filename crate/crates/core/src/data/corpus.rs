use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Tier, ToyLanguageSpec, Transform, Vocab, EN_TAG, EOS};
use crate::error::{Error, Result};
use crate::sha256_hex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TierCounts {
    pub high: usize,
    pub medium: usize,
    pub low: usize,
}

impl Default for TierCounts {
    fn default() -> Self {
        Self {
            high: 20000,
            medium: 5000,
            low: 1000,
        }
    }
}

impl TierCounts {
    pub fn get(&self, tier: Tier) -> usize {
        match tier {
            Tier::High => self.high,
            Tier::Medium => self.medium,
            Tier::Low => self.low,
        }
    }
}

fn default_held_out() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub languages: Vec<ToyLanguageSpec>,
    pub vocab_size: usize,
    /// Inclusive range of content lengths.
    pub min_len: usize,
    pub max_len: usize,
    /// Training pairs per language, by tier.
    #[serde(default)]
    pub tiers: TierCounts,
    #[serde(default = "default_held_out")]
    pub valid_per_language: usize,
    #[serde(default = "default_held_out")]
    pub test_per_language: usize,
    pub seed: u64,
}

impl CorpusConfig {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.vocab_size, self.languages.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages.is_empty() {
            return Err(Error::config("data.languages must not be empty"));
        }
        let mut names = HashSet::new();
        for l in &self.languages {
            if l.name.is_empty() || l.name.contains(['/', '.', '\t', ' ']) {
                return Err(Error::config(format!("invalid language name {:?}", l.name)));
            }
            if !names.insert(&l.name) {
                return Err(Error::config(format!("duplicate language {:?}", l.name)));
            }
        }
        let vocab = self.vocab()?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        let needed = self
            .languages
            .iter()
            .map(|l| self.tiers.get(l.tier) + self.valid_per_language + self.test_per_language)
            .max()
            .unwrap_or(0);
        let c = vocab.content_size() as f64;
        let available: f64 = (self.min_len..=self.max_len).map(|l| c.powi(l as i32)).sum();
        if available < 2.0 * needed as f64 {
            return Err(Error::config(format!(
                "length range {}..={} over {} content tokens cannot supply {needed} distinct sentences",
                self.min_len,
                self.max_len,
                vocab.content_size()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    /// Toy language to English.
    #[serde(rename = "x-en")]
    ToEn,
    #[serde(rename = "en-x")]
    FromEn,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

/// One translation example. `src` is the full encoder row
/// `[target tag, source tag, content.., EOS]`; `tgt` is the bare target
/// content.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub lang: usize,
    pub direction: Direction,
    pub src: Vec<usize>,
    pub tgt: Vec<usize>,
}

impl Pair {
    pub fn content(&self) -> &[usize] {
        &self.src[2..self.src.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub train: Vec<Pair>,
    pub valid: Vec<Pair>,
    pub test: Vec<Pair>,
}

fn make_pair(vocab: &Vocab, lang: usize, t: &Transform, en: Vec<usize>, direction: Direction) -> Pair {
    let x = t.forward(&en, vocab);
    let tag = vocab.lang_tag(lang);
    let (tgt_tag, src_tag, src, tgt) = match direction {
        Direction::ToEn => (EN_TAG, tag, x, en),
        Direction::FromEn => (tag, EN_TAG, en, x),
    };
    let mut row = Vec::with_capacity(src.len() + 3);
    row.extend([tgt_tag, src_tag]);
    row.extend(src);
    row.push(EOS);
    Pair {
        lang,
        direction,
        src: row,
        tgt,
    }
}

impl Corpus {
    /// Deterministic in `config`. Each language gets distinct English
    /// sentences for every split; consecutive sentences alternate direction.
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let mut corpus = Corpus {
            config: config.clone(),
            vocab,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for (li, spec) in config.languages.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(
                config.seed ^ (li as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
            );
            let mut seen = HashSet::new();
            let counts = [
                config.tiers.get(spec.tier),
                config.valid_per_language,
                config.test_per_language,
            ];
            for (split, count) in Split::ALL.into_iter().zip(counts) {
                for k in 0..count {
                    let en = loop {
                        let len = rng.random_range(config.min_len..=config.max_len);
                        let s: Vec<usize> = (0..len)
                            .map(|_| vocab.content_start() + rng.random_range(0..vocab.content_size()))
                            .collect();
                        if seen.insert(s.clone()) {
                            break s;
                        }
                    };
                    let dir = if k % 2 == 0 {
                        Direction::ToEn
                    } else {
                        Direction::FromEn
                    };
                    let pair = make_pair(&vocab, li, &spec.transform, en, dir);
                    corpus.split_mut(split).push(pair);
                }
            }
        }
        Ok(corpus)
    }

    pub fn split(&self, s: Split) -> &[Pair] {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    fn split_mut(&mut self, s: Split) -> &mut Vec<Pair> {
        match s {
            Split::Train => &mut self.train,
            Split::Valid => &mut self.valid,
            Split::Test => &mut self.test,
        }
    }

    /// Pairs of one language within a split.
    pub fn language_pairs(&self, s: Split, lang: usize) -> Vec<Pair> {
        self.split(s).iter().filter(|p| p.lang == lang).cloned().collect()
    }

    /// True when the target is the language's transform (or its inverse) of
    /// the source content.
    pub fn is_consistent(&self, p: &Pair) -> bool {
        let t = &self.config.languages[p.lang].transform;
        let expected = match p.direction {
            Direction::FromEn => t.forward(p.content(), &self.vocab),
            Direction::ToEn => t.inverse(p.content(), &self.vocab),
        };
        expected == p.tgt
    }

    fn file_name(split: Split, lang: &str) -> String {
        format!("{}.{lang}.tsv", split.name())
    }

    fn file_text(&self, split: Split, lang: usize) -> String {
        let mut out = String::new();
        let join = |ids: &[usize]| ids.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for p in self.split(split).iter().filter(|p| p.lang == lang) {
            let _ = writeln!(out, "{}\t{}", join(&p.src), join(&p.tgt));
        }
        out
    }

    /// Manifest describing the corpus and the hash of every data file.
    pub fn manifest(&self) -> serde_json::Value {
        let mut files = Vec::new();
        for split in Split::ALL {
            for (li, spec) in self.config.languages.iter().enumerate() {
                let text = self.file_text(split, li);
                files.push(json!({
                    "file": Self::file_name(split, &spec.name),
                    "split": split,
                    "language": spec.name,
                    "pairs": text.lines().count(),
                    "sha256": sha256_hex(text.as_bytes()),
                }));
            }
        }
        json!({
            "config": self.config,
            "vocab": {
                "size": self.vocab.size,
                "pad": super::PAD,
                "bos": super::BOS,
                "eos": super::EOS,
                "unk": super::UNK,
                "en_tag": EN_TAG,
                "content_start": self.vocab.content_start(),
            },
            "files": files,
        })
    }

    /// Writes the data files and `corpus.json` into `dir`, replacing any
    /// existing files of the same names.
    pub fn write(&self, dir: &Path) -> Result<String> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for split in Split::ALL {
            for (li, spec) in self.config.languages.iter().enumerate() {
                let path = dir.join(Self::file_name(split, &spec.name));
                fs::write(&path, self.file_text(split, li)).map_err(|e| Error::io(&path, e))?;
            }
        }
        let text = serde_json::to_string_pretty(&self.manifest()).expect("manifest serializes") + "\n";
        let path = dir.join("corpus.json");
        fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
        Ok(sha256_hex(text.as_bytes()))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join("corpus.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let config: CorpusConfig = serde_json::from_value(manifest["config"].clone())
            .map_err(|e| Error::format(&mpath, format!("config: {e}")))?;
        let vocab = config.vocab()?;
        let mut corpus = Corpus {
            config: config.clone(),
            vocab,
            train: Vec::new(),
            valid: Vec::new(),
            test: Vec::new(),
        };
        for split in Split::ALL {
            for (li, spec) in config.languages.iter().enumerate() {
                let path = dir.join(Self::file_name(split, &spec.name));
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                for (n, line) in text.lines().enumerate() {
                    let pair = parse_line(line, li, &vocab)
                        .ok_or_else(|| Error::format(&path, format!("line {}: malformed pair", n + 1)))?;
                    corpus.split_mut(split).push(pair);
                }
            }
        }
        Ok(corpus)
    }
}

fn parse_line(line: &str, lang: usize, vocab: &Vocab) -> Option<Pair> {
    let (s, t) = line.split_once('\t')?;
    let ids = |x: &str| -> Option<Vec<usize>> {
        x.split_whitespace()
            .map(|w| w.parse().ok().filter(|&v| v < vocab.size))
            .collect()
    };
    let src = ids(s)?;
    let tgt = ids(t)?;
    if src.len() < 4 || src.last() != Some(&EOS) {
        return None;
    }
    let direction = if src[0] == EN_TAG {
        Direction::ToEn
    } else if src[1] == EN_TAG && src[0] == vocab.lang_tag(lang) {
        Direction::FromEn
    } else {
        return None;
    };
    Some(Pair {
        lang,
        direction,
        src,
        tgt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn small_config() -> CorpusConfig {
        CorpusConfig {
            languages: ToyLanguageSpec::default_set(),
            vocab_size: 32,
            min_len: 2,
            max_len: 6,
            tiers: TierCounts {
                high: 40,
                medium: 20,
                low: 10,
            },
            valid_per_language: 6,
            test_per_language: 5,
            seed: 11,
        }
    }

    #[test]
    fn counts_consistency_and_disjointness() {
        let c = Corpus::generate(&small_config()).unwrap();
        for (li, want) in [40, 20, 10].into_iter().enumerate() {
            assert_eq!(c.language_pairs(Split::Train, li).len(), want);
            assert_eq!(c.language_pairs(Split::Valid, li).len(), 6);
            assert_eq!(c.language_pairs(Split::Test, li).len(), 5);
            let english = |s: Split| -> HashSet<Vec<usize>> {
                c.language_pairs(s, li)
                    .iter()
                    .map(|p| match p.direction {
                        Direction::ToEn => p.tgt.clone(),
                        Direction::FromEn => p.content().to_vec(),
                    })
                    .collect()
            };
            let (tr, va, te) = (english(Split::Train), english(Split::Valid), english(Split::Test));
            assert!(tr.is_disjoint(&va) && tr.is_disjoint(&te) && va.is_disjoint(&te));
        }
        for s in Split::ALL {
            assert!(c.split(s).iter().all(|p| c.is_consistent(p)));
        }
        let dirs: HashSet<Direction> = c.train.iter().map(|p| p.direction).collect();
        assert_eq!(dirs.len(), 2);
    }

    #[test]
    fn round_trip_through_files() {
        let c = Corpus::generate(&small_config()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let h1 = c.write(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
        let h2 = Corpus::generate(&small_config()).unwrap().write(dir.path()).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn invalid_length_range() {
        let mut cfg = small_config();
        cfg.min_len = 5;
        cfg.max_len = 4;
        assert!(matches!(Corpus::generate(&cfg), Err(Error::Config(_))));
        cfg.min_len = 1;
        cfg.max_len = 1;
        assert!(matches!(Corpus::generate(&cfg), Err(Error::Config(_))));
    }
}
