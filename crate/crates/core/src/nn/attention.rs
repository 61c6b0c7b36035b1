use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Value written into masked attention logits before the softmax.
const MASK_FILL: f64 = -1e30;

/// Boolean mask of shape `[batch, queries, keys]`; `true` hides a key from a
/// query. Shared across heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub masked: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, queries: usize, keys: usize, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != batch * queries * keys {
            return Err(Error::dim("attn_mask", &[batch, queries, keys], &[masked.len()]));
        }
        Ok(Self {
            batch,
            queries,
            keys,
            masked,
        })
    }

    /// Hides keys whose `key_keep` entry (row-major `[batch, keys]`) is false.
    pub fn padding(key_keep: &[bool], batch: usize, queries: usize) -> Self {
        let keys = key_keep.len() / batch;
        let mut masked = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            for _ in 0..queries {
                masked.extend(key_keep[b * keys..(b + 1) * keys].iter().map(|k| !k));
            }
        }
        Self {
            batch,
            queries,
            keys,
            masked,
        }
    }

    /// Padding mask that also hides keys after the query position.
    pub fn causal(key_keep: &[bool], batch: usize) -> Self {
        let mut m = Self::padding(key_keep, batch, key_keep.len() / batch);
        let l = m.keys;
        for b in 0..batch {
            for i in 0..l {
                for j in i + 1..l {
                    m.masked[(b * l + i) * l + j] = true;
                }
            }
        }
        m
    }
}

/// Softmax(q·kᵀ/√d_head)·v per head. `q` is `[B, Lq, d]`, `k` and `v` are
/// `[B, Lk, d]`; `d` is split evenly across `heads`.
pub fn scaled_dot_product_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&AttnMask>,
    heads: usize,
) -> Result<Var> {
    let sq = tape.shape(q).to_vec();
    let sk = tape.shape(k).to_vec();
    if sq.len() != 3 || sk.len() != 3 || sq[0] != sk[0] || sq[2] != sk[2] || tape.shape(v) != sk {
        return Err(Error::dim("attention", &sq, &sk));
    }
    let (b, lq, d) = (sq[0], sq[1], sq[2]);
    let lk = sk[1];
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let split = |tape: &mut Tape, x: Var, l: usize| -> Result<Var> {
        let x = tape.reshape(x, &[b, l, heads, dh])?;
        tape.permute(x, &[0, 2, 1, 3])
    };
    let qh = split(tape, q, lq)?;
    let kh = split(tape, k, lk)?;
    let vh = split(tape, v, lk)?;
    let scores = tape.batch_matmul(qh, kh, true)?;
    let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        if (m.batch, m.queries, m.keys) != (b, lq, lk) {
            return Err(Error::dim("attention mask", &[b, lq, lk], &[m.batch, m.queries, m.keys]));
        }
        let per_item = lq * lk;
        let mut full = Vec::with_capacity(b * heads * per_item);
        for bi in 0..b {
            let item = &m.masked[bi * per_item..(bi + 1) * per_item];
            for _ in 0..heads {
                full.extend_from_slice(item);
            }
        }
        scores = tape.masked_fill(scores, full, MASK_FILL)?;
    }
    let weights = tape.softmax(scores, 3)?;
    let ctx = tape.batch_matmul(weights, vh, false)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    tape.reshape(ctx, &[b, lq, d])
}
