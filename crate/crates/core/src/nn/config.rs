use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_balancing() -> f64 {
    0.01
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub experts: usize,
    pub expert_ffn: usize,
    #[serde(default = "default_balancing")]
    pub balancing_coef: f64,
}

impl MoeConfig {
    pub fn new(experts: usize, expert_ffn: usize) -> Self {
        Self {
            experts,
            expert_ffn,
            balancing_coef: default_balancing(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experts == 0 {
            return Err(Error::config("moe.experts must be at least 1"));
        }
        if self.expert_ffn == 0 {
            return Err(Error::config("moe.expert_ffn must be positive"));
        }
        if !(self.balancing_coef >= 0.0 && self.balancing_coef.is_finite()) {
            return Err(Error::config("moe.balancing_coef must be a non-negative number"));
        }
        Ok(())
    }
}

/// Shape of one encoder-decoder transformer. When `moe` is set, even-numbered
/// layers (1-indexed) of both stacks use a mixture-of-experts feed-forward
/// block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    #[serde(default)]
    pub moe: Option<MoeConfig>,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// A dense model with `ffn_size = 4 * d_model`.
    pub fn dense(vocab_size: usize, d_model: usize, heads: usize, layers: usize) -> Self {
        Self {
            vocab_size,
            d_model,
            heads,
            ffn_size: 4 * d_model,
            encoder_layers: layers,
            decoder_layers: layers,
            moe: None,
            dropout: 0.0,
        }
    }

    pub fn with_moe(mut self, experts: usize) -> Self {
        self.moe = Some(MoeConfig::new(experts, self.ffn_size));
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if let Some(moe) = &self.moe {
            moe.validate()?;
        }
        Ok(())
    }

    /// Half the width (rounded down to a multiple of `heads`), half the depth
    /// and half the feed-forward size, without experts.
    pub fn halved(&self) -> Self {
        let heads = self.heads;
        let mut d = (self.d_model / 2) / heads * heads;
        let mut h = heads;
        if d == 0 {
            d = self.d_model / 2;
            h = 1;
        }
        Self {
            vocab_size: self.vocab_size,
            d_model: d.max(1),
            heads: h,
            ffn_size: (self.ffn_size / 2).max(1),
            encoder_layers: (self.encoder_layers / 2).max(1),
            decoder_layers: (self.decoder_layers / 2).max(1),
            moe: None,
            dropout: self.dropout,
        }
    }
}
