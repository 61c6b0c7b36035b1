//! Synthetic multilingual translation tasks.
//!
//! Each toy language is a fixed bijection applied to random "English"
//! token sequences. Pairs run in both directions and the source row starts
//! with the target-language tag, then the source-language tag.

mod batch;
mod corpus;
mod eval;

pub use batch::{make_batches, Batch};
pub use corpus::{Corpus, CorpusConfig, Direction, Pair, Split, TierCounts};
pub use eval::{corpus_bleu, evaluate, greedy_decode, EvalScores, Smoothing};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::nn::PAD;

pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// Tag of the pivot language; language `i` uses `EN_TAG + 1 + i`.
pub const EN_TAG: usize = 4;

/// Token id layout for a corpus with `languages` toy languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub size: usize,
    pub languages: usize,
}

impl Vocab {
    pub fn new(size: usize, languages: usize) -> Result<Self> {
        if size < 8 + languages {
            return Err(Error::config(format!(
                "vocabulary of {size} is too small for {languages} languages (need at least {})",
                8 + languages
            )));
        }
        Ok(Self { size, languages })
    }

    pub fn lang_tag(&self, lang: usize) -> usize {
        EN_TAG + 1 + lang
    }

    /// First content token id.
    pub fn content_start(&self) -> usize {
        EN_TAG + 1 + self.languages
    }

    pub fn content_size(&self) -> usize {
        self.size - self.content_start()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    High,
    Medium,
    Low,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Transform {
    Copy,
    Reverse,
    CyclicSubstitution { key: usize },
    PairSwap,
}

impl Transform {
    /// Maps an English content sequence to this language.
    pub fn forward(&self, x: &[usize], vocab: &Vocab) -> Vec<usize> {
        let (c0, c) = (vocab.content_start(), vocab.content_size());
        match self {
            Transform::Copy => x.to_vec(),
            Transform::Reverse => x.iter().rev().copied().collect(),
            Transform::CyclicSubstitution { key } => {
                x.iter().map(|&t| c0 + (t - c0 + key % c) % c).collect()
            }
            Transform::PairSwap => swap_pairs(x),
        }
    }

    /// Maps a sequence of this language back to English.
    pub fn inverse(&self, y: &[usize], vocab: &Vocab) -> Vec<usize> {
        let (c0, c) = (vocab.content_start(), vocab.content_size());
        match self {
            Transform::CyclicSubstitution { key } => {
                y.iter().map(|&t| c0 + (t - c0 + c - key % c) % c).collect()
            }
            other => other.forward(y, vocab),
        }
    }
}

fn swap_pairs(x: &[usize]) -> Vec<usize> {
    let mut out = x.to_vec();
    for pair in out.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyLanguageSpec {
    pub name: String,
    pub transform: Transform,
    pub tier: Tier,
}

impl ToyLanguageSpec {
    /// Three languages in descending resource order.
    pub fn default_set() -> Vec<Self> {
        vec![
            Self {
                name: "fr".into(),
                transform: Transform::CyclicSubstitution { key: 7 },
                tier: Tier::High,
            },
            Self {
                name: "fi".into(),
                transform: Transform::Reverse,
                tier: Tier::Medium,
            },
            Self {
                name: "hi".into(),
                transform: Transform::PairSwap,
                tier: Tier::Low,
            },
        ]
    }
}
