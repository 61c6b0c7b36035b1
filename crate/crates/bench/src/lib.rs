//! Fixtures shared by the benchmarks.

use onestop::data::{make_batches, Batch, Corpus, CorpusConfig, TierCounts, ToyLanguageSpec};
use onestop::model::{CompositeModel, StandaloneModel, Which};
use onestop::nn::ModelConfig;
use onestop::train::{Strategy, Trainee, Trainer, TrainerConfig};

pub const VOCAB: usize = 64;

pub fn corpus() -> Corpus {
    Corpus::generate(&CorpusConfig {
        languages: ToyLanguageSpec::default_set(),
        vocab_size: VOCAB,
        min_len: 2,
        max_len: 6,
        tiers: TierCounts { high: 200, medium: 50, low: 10 },
        valid_per_language: 10,
        test_per_language: 10,
        seed: 1,
    })
    .expect("corpus")
}

/// One micro-batch of roughly `tokens` tokens.
pub fn batch(c: &Corpus, tokens: usize) -> Batch {
    make_batches(&c.train, tokens, 1).expect("batches").swap_remove(0)
}

pub fn big() -> ModelConfig {
    ModelConfig { ffn_size: 64, ..ModelConfig::dense(VOCAB, 32, 4, 4) }.with_moe(4)
}

pub fn small() -> ModelConfig {
    ModelConfig { ffn_size: 64, ..ModelConfig::dense(VOCAB, 32, 4, 2) }
}

/// Trainer for `strategy` on `arch` ("shared" or "indep"); single trains a
/// standalone small model.
pub fn trainer(strategy: Strategy, arch: &str) -> Trainer {
    let mut cfg = TrainerConfig::new(strategy);
    cfg.warmup_steps = 10;
    let model = match (strategy, arch) {
        (Strategy::Single, _) => {
            cfg.single_target = Which::Small;
            Trainee::Single(StandaloneModel::new(&small(), Which::Small, 1).expect("model"))
        }
        (_, "shared") => Trainee::Composite(CompositeModel::build_shared(&big(), &small(), 1).expect("model")),
        _ => Trainee::Composite(CompositeModel::build_indep(&big(), Some(&big().halved()), 1).expect("model")),
    };
    Trainer::new(cfg, model).expect("trainer")
}
