use serde::{Deserialize, Serialize};

use super::{Forward, MoeConfig};
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Load statistics of one MoE layer over the routed (non-padding) tokens.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    /// Fraction of tokens sent to each expert.
    pub fraction: Vec<f64>,
    /// Mean router probability of each expert.
    pub mean_prob: Vec<f64>,
    pub tokens: usize,
}

impl RoutingReport {
    /// `E · Σ f_i · P_i`.
    pub fn balancing_loss(&self) -> f64 {
        let e = self.fraction.len() as f64;
        e * self
            .fraction
            .iter()
            .zip(&self.mean_prob)
            .map(|(f, p)| f * p)
            .sum::<f64>()
    }
}

pub struct MoeOutput {
    pub out: Var,
    /// Switch-style balancing loss; zero when no token was routed.
    pub balancing: Var,
    pub report: RoutingReport,
}

impl Forward<'_> {
    /// Top-1 mixture of experts over the rows of `x` (all leading axes are
    /// flattened). Rows with `keep[r] == false` are not routed and come out as
    /// zeros. The chosen expert's output is scaled by its router probability.
    pub fn moe(&mut self, prefix: &str, cfg: &MoeConfig, x: Var, keep: &[bool]) -> Result<MoeOutput> {
        if cfg.experts == 0 {
            return Err(Error::config("mixture of experts needs at least one expert"));
        }
        let shape = self.tape.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::dim("moe", &shape, &[]))?;
        let rows = self.tape.value(x).len() / d;
        if keep.len() != rows {
            return Err(Error::dim("moe", &shape, &[keep.len()]));
        }
        let e = cfg.experts;
        let routed: Vec<usize> = (0..rows).filter(|&r| keep[r]).collect();
        let n = routed.len();
        if n == 0 {
            let out = self.tape.constant_from(&shape, vec![0.0; rows * d])?;
            let balancing = self.tape.constant_from(&[], vec![0.0])?;
            return Ok(MoeOutput {
                out,
                balancing,
                report: RoutingReport {
                    fraction: vec![0.0; e],
                    mean_prob: vec![0.0; e],
                    tokens: 0,
                },
            });
        }

        let flat = self.tape.reshape(x, &[rows, d])?;
        let tokens = self.tape.select_rows(flat, &routed)?;
        let router = self.param(&format!("{prefix}.router"))?;
        let logits = self.tape.matmul(tokens, router)?;
        let probs = self.tape.softmax(logits, 1)?;
        let choice = self.tape.argmax(probs);

        let mut counts = vec![0usize; e];
        for &c in &choice {
            counts[c] += 1;
        }
        let mut outputs = Vec::new();
        let mut order = Vec::with_capacity(n);
        for (expert, &count) in counts.iter().enumerate() {
            if count == 0 {
                continue;
            }
            let idx: Vec<usize> = (0..n).filter(|&t| choice[t] == expert).collect();
            let sub = self.tape.select_rows(tokens, &idx)?;
            outputs.push(self.feed_forward(&format!("{prefix}.expert{expert}"), sub)?);
            order.extend(idx);
        }
        let grouped = if outputs.len() == 1 {
            outputs[0]
        } else {
            self.tape.concat(&outputs, 0)?
        };
        let expert_out = self.tape.scatter_rows(grouped, &order, n)?;
        let gate = self.tape.pick(probs, &choice)?;
        let gated = self.tape.scale_rows(expert_out, gate)?;
        let placed = self.tape.scatter_rows(gated, &routed, rows)?;
        let out = self.tape.reshape(placed, &shape)?;

        let fraction: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        let summed = self.tape.sum_axis(probs, 0)?;
        let mean = self.tape.div_scalar(summed, n as f64);
        let mean_prob = self.tape.value(mean).to_vec();
        let weights = counts
            .iter()
            .map(|&c| (e * c) as f64 / n as f64)
            .collect();
        let balancing = self.tape.weighted_sum(mean, weights)?;
        Ok(MoeOutput {
            out,
            balancing,
            report: RoutingReport {
                fraction,
                mean_prob,
                tokens: n,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use crate::tensor::{Tape, Tensor};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn params(d: usize, f: usize, e: usize, seed: u64) -> BTreeMap<String, Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = BTreeMap::new();
        p.insert("m.router".into(), random(&[d, e], &mut rng));
        for i in 0..e {
            p.insert(format!("m.expert{i}.fc1.w"), random(&[d, f], &mut rng));
            p.insert(format!("m.expert{i}.fc1.b"), random(&[f], &mut rng));
            p.insert(format!("m.expert{i}.fc2.w"), random(&[f, d], &mut rng));
            p.insert(format!("m.expert{i}.fc2.b"), random(&[d], &mut rng));
        }
        p
    }

    #[test]
    fn single_expert_is_a_plain_ffn_with_unit_balancing() {
        let p = params(4, 6, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 3, 4], &mut rng);
        let keep = vec![true; 6];

        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(x.clone());
        let moe = fwd.moe("m", &MoeConfig::new(1, 6), xv, &keep).unwrap();
        let ffn = fwd.feed_forward("m.expert0", xv).unwrap();
        assert_eq!(fwd.tape.value(moe.out), fwd.tape.value(ffn));
        assert_eq!(fwd.tape.scalar(moe.balancing), 1.0);
        assert_eq!(moe.report.fraction, vec![1.0]);

        let moe_sum = fwd.tape.sum(moe.out);
        tape.backward(moe_sum).unwrap();
        let moe_grads: Vec<Vec<f64>> = tape
            .param_grads()
            .filter(|(n, _)| n.contains("expert"))
            .map(|(_, g)| g.unwrap().to_vec())
            .collect();

        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(x);
        let ffn = fwd.feed_forward("m.expert0", xv).unwrap();
        let s = fwd.tape.sum(ffn);
        tape.backward(s).unwrap();
        let ffn_grads: Vec<Vec<f64>> = tape.param_grads().map(|(_, g)| g.unwrap().to_vec()).collect();
        assert_eq!(moe_grads, ffn_grads);
    }

    #[test]
    fn each_token_uses_exactly_one_expert_and_padding_is_zero() {
        let (d, e) = (4, 3);
        let p = params(d, 5, e, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&[8, d], &mut rng);
        let keep: Vec<bool> = (0..8).map(|i| i % 4 != 3).collect();
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(x.clone());
        let moe = fwd.moe("m", &MoeConfig::new(e, 5), xv, &keep).unwrap();
        let out = fwd.tape.value(moe.out).to_vec();
        for r in 0..8 {
            let row = &out[r * d..(r + 1) * d];
            if !keep[r] {
                assert!(row.iter().all(|&v| v == 0.0));
                continue;
            }
            // Recompute the row with every expert; exactly one must match.
            let xr = fwd.tape.constant(Tensor::new(vec![1, d], x.data()[r * d..(r + 1) * d].to_vec()).unwrap());
            let router = fwd.param("m.router").unwrap();
            let logits = fwd.tape.matmul(xr, router).unwrap();
            let probs = fwd.tape.softmax(logits, 1).unwrap();
            let pv = fwd.tape.value(probs).to_vec();
            let matches = (0..e)
                .filter(|&i| {
                    let y = fwd.feed_forward(&format!("m.expert{i}"), xr).unwrap();
                    let y = fwd.tape.value(y).to_vec();
                    y.iter().zip(row).all(|(a, b)| (a * pv[i] - b).abs() < 1e-12)
                })
                .count();
            assert_eq!(matches, 1, "row {r}");
        }
        assert_eq!(moe.report.tokens, 6);
        assert!((moe.report.fraction.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn report_balancing_matches_loss_and_skewed_routing_exceeds_one() {
        let (d, e) = (4, 4);
        let mut p = params(d, 3, e, 5);
        // A router that strongly prefers expert 0 for positive inputs.
        let mut router = Tensor::zeros(&[d, e]);
        for j in 0..d {
            router.data_mut()[j * e] = 40.0;
        }
        p.insert("m.router".into(), router);
        let x = Tensor::full(&[5, d], 1.0);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(x);
        let moe = fwd.moe("m", &MoeConfig::new(e, 3), xv, &[true; 5]).unwrap();
        assert_eq!(moe.report.fraction, vec![1.0, 0.0, 0.0, 0.0]);
        let bal = fwd.tape.scalar(moe.balancing);
        assert!((bal - moe.report.balancing_loss()).abs() < 1e-15);
        assert!((bal - 4.0).abs() < 1e-6, "{bal}");
    }

    #[test]
    fn no_routed_tokens_yields_zeros() {
        let p = params(2, 2, 2, 6);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(Tensor::full(&[3, 2], 1.0));
        let moe = fwd.moe("m", &MoeConfig::new(2, 2), xv, &[false; 3]).unwrap();
        assert!(fwd.tape.value(moe.out).iter().all(|&v| v == 0.0));
        assert_eq!(fwd.tape.scalar(moe.balancing), 0.0);
    }

    #[test]
    fn zero_experts_is_config_error() {
        let p = params(2, 2, 1, 7);
        let mut tape = Tape::new();
        let mut fwd = Forward::new(&mut tape, &p);
        let xv = fwd.tape.constant(Tensor::full(&[3, 2], 1.0));
        let err = fwd.moe("m", &MoeConfig::new(0, 2), xv, &[true; 3]).err().unwrap();
        assert!(matches!(err, Error::Config(_)));
    }
}
