//! Transformer building blocks evaluated on a [`Tape`].

mod attention;
mod config;
mod moe;
mod transformer;

pub use attention::{scaled_dot_product_attention, AttnMask};
pub use config::{MoeConfig, ModelConfig};
pub use moe::{MoeOutput, RoutingReport};
pub use transformer::{Block, Encoded, NetOutput, Network, PAD};

use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Anything that can hand out parameters by name.
pub trait ParamSource {
    fn tensor(&self, name: &str) -> Option<&Tensor>;
}

impl ParamSource for std::collections::BTreeMap<String, Tensor> {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Forward-pass context: the tape being recorded, where parameters come from,
/// and the dropout source when training.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    params: &'a dyn ParamSource,
    dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a dyn ParamSource) -> Self {
        Self {
            tape,
            params,
            dropout: None,
        }
    }

    /// Enables dropout at `rate`; a rate of zero leaves the pass deterministic
    /// and does not touch `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, rng));
        }
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self
            .params
            .tensor(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?;
        Ok(self.tape.param(name, t))
    }

    /// `x · W + b` with `W = {prefix}.w` of shape `[in, out]`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add(y, b)
    }

    pub fn layer_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gamma"))?;
        let b = self.param(&format!("{prefix}.beta"))?;
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    /// Two-layer ReLU network.
    pub fn feed_forward(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let h = self.linear(&format!("{prefix}.fc1"), x)?;
        let h = self.tape.relu(h);
        let h = self.dropout(h)?;
        self.linear(&format!("{prefix}.fc2"), h)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 / (1.0 - *rate);
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
            .collect();
        let shape = self.tape.shape(x).to_vec();
        let m = self.tape.constant_from(&shape, mask)?;
        self.tape.mul(x, m)
    }

    /// Multi-head attention with projections `{prefix}.{q,k,v,o}`.
    pub fn attention(
        &mut self,
        prefix: &str,
        xq: Var,
        xkv: Var,
        mask: &AttnMask,
        heads: usize,
    ) -> Result<Var> {
        let q = self.linear(&format!("{prefix}.q"), xq)?;
        let k = self.linear(&format!("{prefix}.k"), xkv)?;
        let v = self.linear(&format!("{prefix}.v"), xkv)?;
        let ctx = scaled_dot_product_attention(self.tape, q, k, v, Some(mask), heads)?;
        self.linear(&format!("{prefix}.o"), ctx)
    }
}
