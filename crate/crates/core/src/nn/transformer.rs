use serde::{Deserialize, Serialize};

use super::{AttnMask, Forward, ModelConfig, MoeConfig, RoutingReport};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Padding token id.
pub const PAD: usize = 0;

/// One pre-norm transformer layer. The feed-forward sublayer is a mixture of
/// experts when `moe` is set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub prefix: String,
    pub ffn: usize,
    pub moe: Option<MoeConfig>,
}

impl Block {
    fn shapes(&self, d: usize, decoder: bool, out: &mut Vec<(String, Vec<usize>)>) {
        let p = &self.prefix;
        let norm = |name: &str, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{p}.{name}.gamma"), vec![d]));
            out.push((format!("{p}.{name}.beta"), vec![d]));
        };
        let linear = |name: String, i: usize, o: usize, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{name}.w"), vec![i, o]));
            out.push((format!("{name}.b"), vec![o]));
        };
        let attn = |name: &str, out: &mut Vec<(String, Vec<usize>)>| {
            for x in ["q", "k", "v", "o"] {
                linear(format!("{p}.{name}.{x}"), d, d, out);
            }
        };
        norm("self_norm", out);
        attn("self_attn", out);
        if decoder {
            norm("cross_norm", out);
            attn("cross_attn", out);
        }
        norm("ffn_norm", out);
        match &self.moe {
            None => {
                linear(format!("{p}.ffn.fc1"), d, self.ffn, out);
                linear(format!("{p}.ffn.fc2"), self.ffn, d, out);
            }
            Some(m) => {
                out.push((format!("{p}.moe.router"), vec![d, m.experts]));
                for e in 0..m.experts {
                    linear(format!("{p}.moe.expert{e}.fc1"), d, m.expert_ffn, out);
                    linear(format!("{p}.moe.expert{e}.fc2"), m.expert_ffn, d, out);
                }
            }
        }
    }
}

/// A resolved forward path: which named parameters each layer reads.
/// Two networks may name the same parameters, which is how layers are shared.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    /// `[vocab, d]` table used for input embedding and, transposed, as the
    /// output projection.
    pub embedding: String,
    pub encoder: Vec<Block>,
    pub decoder: Vec<Block>,
    pub encoder_norm: String,
    pub decoder_norm: String,
}

pub struct Encoded {
    pub memory: Var,
    pub src_keep: Vec<bool>,
    pub batch: usize,
    balancing: Vec<Var>,
    routing: Vec<RoutingReport>,
}

pub struct NetOutput {
    /// `[batch, tgt_len, vocab]` unnormalised scores.
    pub logits: Var,
    /// Sum of the balancing losses of every MoE layer traversed.
    pub balancing: Option<Var>,
    pub routing: Vec<RoutingReport>,
}

impl Network {
    /// A plain stack under `scope`: `{scope}.enc.{i}`, `{scope}.dec.{i}`.
    /// With experts configured, even-numbered layers (1-indexed) are MoE.
    pub fn standalone(cfg: &ModelConfig, scope: &str) -> Self {
        let blocks = |side: &str, n: usize| {
            (0..n)
                .map(|i| Block {
                    prefix: format!("{scope}.{side}.{i}"),
                    ffn: cfg.ffn_size,
                    moe: if i % 2 == 1 { cfg.moe.clone() } else { None },
                })
                .collect()
        };
        Self {
            vocab_size: cfg.vocab_size,
            d_model: cfg.d_model,
            heads: cfg.heads,
            embedding: format!("{scope}.embed"),
            encoder: blocks("enc", cfg.encoder_layers),
            decoder: blocks("dec", cfg.decoder_layers),
            encoder_norm: format!("{scope}.enc_norm"),
            decoder_norm: format!("{scope}.dec_norm"),
        }
    }

    /// Every parameter this path reads, in traversal order, without repeats.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![(self.embedding.clone(), vec![self.vocab_size, d])];
        for b in &self.encoder {
            b.shapes(d, false, &mut out);
        }
        out.push((format!("{}.gamma", self.encoder_norm), vec![d]));
        out.push((format!("{}.beta", self.encoder_norm), vec![d]));
        for b in &self.decoder {
            b.shapes(d, true, &mut out);
        }
        out.push((format!("{}.gamma", self.decoder_norm), vec![d]));
        out.push((format!("{}.beta", self.decoder_norm), vec![d]));
        let mut seen = std::collections::HashSet::new();
        out.retain(|(n, _)| seen.insert(n.clone()));
        out
    }

    pub fn param_names(&self) -> Vec<String> {
        self.param_shapes().into_iter().map(|(n, _)| n).collect()
    }

    /// Number of scalar parameters reachable from this path.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn has_moe(&self) -> bool {
        self.encoder.iter().chain(&self.decoder).any(|b| b.moe.is_some())
    }

    fn embed(&self, fwd: &mut Forward, ids: &[usize], batch: usize) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::config(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let d = self.d_model;
        let len = ids.len() / batch;
        let table = fwd.param(&self.embedding)?;
        let rows = fwd.tape.select_rows(table, ids)?;
        let rows = fwd.tape.scale(rows, (d as f64).sqrt());
        let pos = positions(len, d);
        let mut tiled = Vec::with_capacity(ids.len() * d);
        for _ in 0..batch {
            tiled.extend_from_slice(&pos);
        }
        let pos = fwd.tape.constant_from(&[ids.len(), d], tiled)?;
        let x = fwd.tape.add(rows, pos)?;
        let x = fwd.tape.reshape(x, &[batch, len, d])?;
        fwd.dropout(x)
    }

    fn ffn_sublayer(
        &self,
        fwd: &mut Forward,
        block: &Block,
        x: Var,
        keep: &[bool],
        balancing: &mut Vec<Var>,
        routing: &mut Vec<RoutingReport>,
    ) -> Result<Var> {
        let h = fwd.layer_norm(&format!("{}.ffn_norm", block.prefix), x)?;
        let y = match &block.moe {
            None => fwd.feed_forward(&format!("{}.ffn", block.prefix), h)?,
            Some(cfg) => {
                let out = fwd.moe(&format!("{}.moe", block.prefix), cfg, h, keep)?;
                balancing.push(out.balancing);
                routing.push(out.report);
                out.out
            }
        };
        let y = fwd.dropout(y)?;
        fwd.tape.add(x, y)
    }

    fn attn_sublayer(
        &self,
        fwd: &mut Forward,
        prefix: &str,
        x: Var,
        memory: Option<Var>,
        mask: &AttnMask,
    ) -> Result<Var> {
        let h = fwd.layer_norm(&format!("{prefix}_norm"), x)?;
        let kv = memory.unwrap_or(h);
        let a = fwd.attention(&format!("{prefix}_attn"), h, kv, mask, self.heads)?;
        let a = fwd.dropout(a)?;
        fwd.tape.add(x, a)
    }

    /// Runs the encoder over `src`, a row-major `[batch, len]` id grid.
    pub fn encode(&self, fwd: &mut Forward, src: &[usize], batch: usize) -> Result<Encoded> {
        check_grid(src, batch)?;
        let keep: Vec<bool> = src.iter().map(|&t| t != PAD).collect();
        let mask = AttnMask::padding(&keep, batch, src.len() / batch);
        let mut x = self.embed(fwd, src, batch)?;
        let (mut balancing, mut routing) = (Vec::new(), Vec::new());
        for block in &self.encoder {
            x = self.attn_sublayer(fwd, &format!("{}.self", block.prefix), x, None, &mask)?;
            x = self.ffn_sublayer(fwd, block, x, &keep, &mut balancing, &mut routing)?;
        }
        let memory = fwd.layer_norm(&self.encoder_norm, x)?;
        Ok(Encoded {
            memory,
            src_keep: keep,
            batch,
            balancing,
            routing,
        })
    }

    /// Teacher-forced decoder pass over `tgt_in` (`[batch, len]`).
    pub fn decode(&self, fwd: &mut Forward, enc: &Encoded, tgt_in: &[usize]) -> Result<NetOutput> {
        let batch = enc.batch;
        check_grid(tgt_in, batch)?;
        let keep: Vec<bool> = tgt_in.iter().map(|&t| t != PAD).collect();
        let len = tgt_in.len() / batch;
        let self_mask = AttnMask::causal(&keep, batch);
        let cross_mask = AttnMask::padding(&enc.src_keep, batch, len);
        let mut x = self.embed(fwd, tgt_in, batch)?;
        let mut balancing = enc.balancing.clone();
        let mut routing = enc.routing.clone();
        for block in &self.decoder {
            let p = &block.prefix;
            x = self.attn_sublayer(fwd, &format!("{p}.self"), x, None, &self_mask)?;
            x = self.attn_sublayer(fwd, &format!("{p}.cross"), x, Some(enc.memory), &cross_mask)?;
            x = self.ffn_sublayer(fwd, block, x, &keep, &mut balancing, &mut routing)?;
        }
        let h = fwd.layer_norm(&self.decoder_norm, x)?;
        let table = fwd.param(&self.embedding)?;
        let logits = fwd.tape.matmul_ex(h, table, true)?;
        let balancing = match balancing.split_first() {
            None => None,
            Some((&first, rest)) => {
                let mut total = first;
                for &b in rest {
                    total = fwd.tape.add(total, b)?;
                }
                Some(total)
            }
        };
        Ok(NetOutput {
            logits,
            balancing,
            routing,
        })
    }

    pub fn forward(
        &self,
        fwd: &mut Forward,
        src: &[usize],
        tgt_in: &[usize],
        batch: usize,
    ) -> Result<NetOutput> {
        let enc = self.encode(fwd, src, batch)?;
        self.decode(fwd, &enc, tgt_in)
    }
}

fn check_grid(ids: &[usize], batch: usize) -> Result<()> {
    if batch == 0 || ids.is_empty() || !ids.len().is_multiple_of(batch) {
        return Err(Error::dim("token grid", &[ids.len()], &[batch]));
    }
    Ok(())
}

/// Sinusoidal position table, `[len, d]` row-major.
fn positions(len: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i - i % 2) as f64) / d as f64);
            let a = pos as f64 * rate;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    out
}
