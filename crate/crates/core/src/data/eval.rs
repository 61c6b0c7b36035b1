use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{Pair, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::{Forward, Network, ParamSource};
use crate::tensor::Tape;

/// Rows decoded together.
const DECODE_ROWS: usize = 64;

/// Argmax decoding from BOS until EOS or `max_len` generated tokens.
/// The returned sequences exclude BOS and EOS. Ties go to the lowest id.
pub fn greedy_decode(
    net: &Network,
    params: &dyn ParamSource,
    src: &[Vec<usize>],
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be at least 1"));
    }
    if src.is_empty() {
        return Ok(Vec::new());
    }
    let b = src.len();
    let s = src.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut grid = vec![PAD; b * s];
    for (r, row) in src.iter().enumerate() {
        grid[r * s..r * s + row.len()].copy_from_slice(row);
    }

    let mut tape = Tape::no_grad();
    let mut fwd = Forward::new(&mut tape, params);
    // Bind everything up front so truncation below never drops a binding.
    for name in net.param_names() {
        fwd.param(&name)?;
    }
    let enc = net.encode(&mut fwd, &grid, b)?;
    let mark = fwd.tape.len();

    let mut seqs: Vec<Vec<usize>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    for step in 0..max_len {
        let t = step + 1;
        let tgt_in: Vec<usize> = seqs.iter().flatten().copied().collect();
        let out = net.decode(&mut fwd, &enc, &tgt_in)?;
        let v = net.vocab_size;
        let logits = fwd.tape.value(out.logits);
        for r in 0..b {
            let row = &logits[(r * t + t - 1) * v..(r * t + t) * v];
            let tok = if done[r] {
                PAD
            } else {
                crate::tensor::argmax_rows(row, v)[0]
            };
            seqs[r].push(tok);
            if tok == EOS {
                done[r] = true;
            }
        }
        fwd.tape.truncate(mark);
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(seqs
        .into_iter()
        .map(|s| s[1..].iter().copied().take_while(|&t| t != EOS).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Smoothing {
    /// Any zero n-gram precision gives a score of zero.
    #[default]
    None,
    /// Zero match counts are replaced by 1/2^k for the k-th such order.
    Exp,
}

/// Corpus BLEU-4 on a 0..100 scale: clipped n-gram precisions, geometric
/// mean and brevity penalty.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], smoothing: Smoothing) -> f64 {
    assert_eq!(hyps.len(), refs.len(), "hypothesis and reference counts differ");
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let ref_counts = ngrams(r, n);
            for (g, c) in ngrams(h, n) {
                matches[n - 1] += c.min(ref_counts.get(&g).copied().unwrap_or(0));
            }
            totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut k = 0;
    for n in 0..4 {
        let p = if matches[n] > 0 {
            matches[n] as f64 / totals[n] as f64
        } else {
            match smoothing {
                Smoothing::None => return 0.0,
                Smoothing::Exp => {
                    k += 1;
                    if totals[n] == 0 {
                        return 0.0;
                    }
                    1.0 / (2f64.powi(k) * totals[n] as f64)
                }
            }
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * (log_sum / 4.0).exp()
}

fn ngrams<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalScores {
    pub bleu: f64,
    pub exact_match: f64,
    /// Reference positions where the hypothesis has the same token.
    pub token_accuracy: f64,
    pub sentences: usize,
}

impl EvalScores {
    pub fn from_outputs(hyps: &[Vec<usize>], refs: &[Vec<usize>], smoothing: Smoothing) -> Result<Self> {
        if refs.is_empty() {
            return Err(Error::contract("cannot evaluate an empty split"));
        }
        let exact = hyps.iter().zip(refs).filter(|(h, r)| h == r).count();
        let ref_tokens: usize = refs.iter().map(Vec::len).sum();
        let hits: usize = hyps
            .iter()
            .zip(refs)
            .map(|(h, r)| h.iter().zip(r).filter(|(a, b)| a == b).count())
            .sum();
        Ok(Self {
            bleu: corpus_bleu(hyps, refs, smoothing),
            exact_match: exact as f64 / refs.len() as f64,
            token_accuracy: hits as f64 / ref_tokens.max(1) as f64,
            sentences: refs.len(),
        })
    }
}

/// Decodes every pair and scores the output against its target.
pub fn evaluate(
    net: &Network,
    params: &dyn ParamSource,
    pairs: &[Pair],
    smoothing: Smoothing,
) -> Result<EvalScores> {
    if pairs.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let mut hyps = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(DECODE_ROWS) {
        let src: Vec<Vec<usize>> = chunk.iter().map(|p| p.src.clone()).collect();
        // Targets are as long as the source content, so this leaves slack.
        let max_len = src.iter().map(Vec::len).max().unwrap_or(0) + 2;
        hyps.extend(greedy_decode(net, params, &src, max_len)?);
    }
    let refs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tgt.clone()).collect();
    EvalScores::from_outputs(&hyps, &refs, smoothing)
}
