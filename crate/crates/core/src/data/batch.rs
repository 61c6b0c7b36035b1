use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Pair, BOS, EOS, PAD};
use crate::error::{Error, Result};

/// Padded, row-major token blocks for one micro-batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub rows: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[rows, src_len]`
    pub src: Vec<usize>,
    /// `[rows, tgt_len]`, starting with BOS.
    pub tgt_in: Vec<usize>,
    /// `[rows, tgt_len]`, ending with EOS.
    pub tgt_out: Vec<usize>,
    /// Index of each row in the input slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[Pair], indices: &[usize]) -> Self {
        let rows = indices.len();
        let src_len = indices.iter().map(|&i| pairs[i].src.len()).max().unwrap_or(0);
        let tgt_len = indices.iter().map(|&i| pairs[i].tgt.len() + 1).max().unwrap_or(0);
        let mut b = Batch {
            rows,
            src_len,
            tgt_len,
            src: vec![PAD; rows * src_len],
            tgt_in: vec![PAD; rows * tgt_len],
            tgt_out: vec![PAD; rows * tgt_len],
            indices: indices.to_vec(),
        };
        for (r, &i) in indices.iter().enumerate() {
            let p = &pairs[i];
            b.src[r * src_len..r * src_len + p.src.len()].copy_from_slice(&p.src);
            let ti = &mut b.tgt_in[r * tgt_len..];
            ti[0] = BOS;
            ti[1..=p.tgt.len()].copy_from_slice(&p.tgt);
            let to = &mut b.tgt_out[r * tgt_len..];
            to[..p.tgt.len()].copy_from_slice(&p.tgt);
            to[p.tgt.len()] = EOS;
        }
        b
    }

    /// Non-pad target positions.
    pub fn target_keep(&self) -> Vec<bool> {
        self.tgt_out.iter().map(|&t| t != PAD).collect()
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }

    /// Padded cost of the batch in tokens.
    pub fn cost(&self) -> usize {
        self.rows * self.src_len.max(self.tgt_len)
    }
}

fn row_cost(p: &Pair) -> usize {
    p.src.len().max(p.tgt.len() + 1)
}

/// Groups pairs of similar length so that `rows * longest row` stays within
/// `budget` tokens. Deterministic in `seed`; batch order is shuffled.
pub fn make_batches(pairs: &[Pair], budget: usize, seed: u64) -> Result<Vec<Batch>> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot batch an empty split"));
    }
    if let Some(p) = pairs.iter().find(|p| row_cost(p) > budget) {
        return Err(Error::contract(format!(
            "a row of {} tokens exceeds the batch budget of {budget}",
            row_cost(p)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| row_cost(&pairs[i]));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0;
    for i in order {
        let c = row_cost(&pairs[i]);
        let m = cur_max.max(c);
        if !cur.is_empty() && (cur.len() + 1) * m > budget {
            groups.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(c);
        cur.push(i);
    }
    groups.push(cur);
    groups.shuffle(&mut rng);
    Ok(groups.iter().map(|g| Batch::from_pairs(pairs, g)).collect())
}
