//! Token-level cross-entropy, symmetric KL between two submodels, and the
//! per-submodel training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Training stage: 1 keeps the KL consistency term, 2 drops it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("stage must be 1 or 2, got {v}")),
        }
    }
}

fn kept_rows(tape: &mut Tape, logits: Var, keep: &[bool], op: &'static str) -> Result<(Var, Vec<usize>)> {
    let shape = tape.shape(logits).to_vec();
    let v = *shape.last().ok_or_else(|| Error::dim(op, &shape, &[]))?;
    let rows = tape.value(logits).len() / v;
    if keep.len() != rows {
        return Err(Error::dim(op, &shape, &[keep.len()]));
    }
    let idx: Vec<usize> = (0..rows).filter(|&r| keep[r]).collect();
    if idx.is_empty() {
        return Err(Error::contract(format!("{op}: no unmasked positions")));
    }
    let flat = tape.reshape(logits, &[rows, v])?;
    Ok((tape.select_rows(flat, &idx)?, idx))
}

/// Mean negative log-likelihood of `targets` over positions where `keep` is
/// true. `logits` is `[..., V]`; `targets` and `keep` run over the leading
/// positions.
pub fn cross_entropy(tape: &mut Tape, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
    let v = *tape.shape(logits).last().unwrap_or(&0);
    if targets.len() != keep.len() {
        return Err(Error::dim("cross_entropy", &[targets.len()], &[keep.len()]));
    }
    if let Some(&bad) = targets
        .iter()
        .zip(keep)
        .find_map(|(t, &k)| (k && *t >= v).then_some(t))
    {
        return Err(Error::contract(format!(
            "cross_entropy: target {bad} outside vocabulary of {v}"
        )));
    }
    let (rows, idx) = kept_rows(tape, logits, keep, "cross_entropy")?;
    let logp = tape.log_softmax(rows, 1)?;
    let picked: Vec<usize> = idx.iter().map(|&r| targets[r]).collect();
    let ll = tape.pick(logp, &picked)?;
    let total = tape.sum(ll);
    let mean = tape.div_scalar(total, idx.len() as f64);
    Ok(tape.scale(mean, -1.0))
}

/// `(1/N) Σ [KL(p‖q) + KL(q‖p)]` over kept positions, written as
/// `Σ_v (p − q)(log p − log q)` so that swapping the arguments gives the
/// identical value.
pub fn symmetric_kl(tape: &mut Tape, logits_a: Var, logits_b: Var, keep: &[bool]) -> Result<Var> {
    if tape.shape(logits_a) != tape.shape(logits_b) {
        return Err(Error::dim("symmetric_kl", tape.shape(logits_a), tape.shape(logits_b)));
    }
    let (a, idx) = kept_rows(tape, logits_a, keep, "symmetric_kl")?;
    let (b, _) = kept_rows(tape, logits_b, keep, "symmetric_kl")?;
    let la = tape.log_softmax(a, 1)?;
    let lb = tape.log_softmax(b, 1)?;
    let pa = tape.exp(la);
    let pb = tape.exp(lb);
    let dp = tape.sub(pa, pb)?;
    let dl = tape.sub(la, lb)?;
    let terms = tape.mul(dp, dl)?;
    let total = tape.sum(terms);
    Ok(tape.div_scalar(total, idx.len() as f64))
}

/// Plain-value symmetric KL over `[rows, width]` logits, for monitoring
/// without a tape.
pub fn symmetric_kl_value(a: &[f64], b: &[f64], width: usize, keep: &[bool]) -> Result<f64> {
    if a.len() != b.len() || a.len() != keep.len() * width {
        return Err(Error::dim("symmetric_kl", &[a.len()], &[b.len()]));
    }
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        row.iter().map(|x| x - lse).collect()
    };
    let mut total = 0.0;
    let mut n = 0;
    for (r, _) in keep.iter().enumerate().filter(|(_, &k)| k) {
        let la = log_softmax(&a[r * width..(r + 1) * width]);
        let lb = log_softmax(&b[r * width..(r + 1) * width]);
        total += la
            .iter()
            .zip(&lb)
            .map(|(x, y)| (x.exp() - y.exp()) * (x - y))
            .sum::<f64>();
        n += 1;
    }
    if n == 0 {
        return Err(Error::contract("symmetric_kl: no unmasked positions"));
    }
    Ok(total / n as f64)
}

/// The loss terms of one submodel.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub ce: Var,
    /// Consistency term against the other submodel, if computed.
    pub kl: Option<Var>,
    /// Summed balancing loss, present only for models with experts.
    pub balancing: Option<Var>,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("alpha must be a non-negative number, got {alpha}")));
    }
    Ok(())
}

/// Stage 1: `ce + alpha·kl + coef·balancing`; stage 2: `ce + coef·balancing`.
pub fn composite_objective(
    tape: &mut Tape,
    terms: LossTerms,
    alpha: f64,
    balancing_coef: f64,
    stage: Stage,
) -> Result<Var> {
    check_alpha(alpha)?;
    let mut total = terms.ce;
    if stage == Stage::One {
        if let Some(kl) = terms.kl {
            let k = tape.scale(kl, alpha);
            total = tape.add(total, k)?;
        }
    }
    if let Some(b) = terms.balancing {
        let b = tape.scale(b, balancing_coef);
        total = tape.add(total, b)?;
    }
    Ok(total)
}

/// [`composite_objective`] on plain numbers.
pub fn objective_value(
    ce: f64,
    kl: Option<f64>,
    balancing: Option<f64>,
    alpha: f64,
    balancing_coef: f64,
    stage: Stage,
) -> Result<f64> {
    check_alpha(alpha)?;
    let mut total = ce;
    if stage == Stage::One {
        if let Some(kl) = kl {
            total += kl * alpha;
        }
    }
    if let Some(b) = balancing {
        total += b * balancing_coef;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::Tensor;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_v() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 3, 4]));
        let ce = cross_entropy(&mut tape, l, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((tape.scalar(ce) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_logits_give_small_loss() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[2, 3], &[20.0, 0.0, 0.0, 0.0, 0.0, 20.0]));
        let ce = cross_entropy(&mut tape, l, &[0, 2], &[true, true]).unwrap();
        assert!(tape.scalar(ce) <= 1e-3);
    }

    #[test]
    fn hand_computed_batch() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 2, 2], &[0.0, 3f64.ln(), 0.0, 0.0]));
        let ce = cross_entropy(&mut tape, l, &[1, 0], &[true, true]).unwrap();
        let expected = -(0.75f64.ln() + 0.5f64.ln()) / 2.0;
        assert!((tape.scalar(ce) - expected).abs() < 1e-15);
    }

    #[test]
    fn padded_positions_do_not_matter() {
        let keep = [true, false, true];
        let mut a = vec![0.1, 0.4, -0.3, 9.0, -9.0, 3.0, 0.2, 0.0, 0.5];
        let run = |a: &[f64]| {
            let mut tape = Tape::new();
            let l = tape.constant(t(&[3, 3], a));
            let ce = cross_entropy(&mut tape, l, &[2, 99, 0], &keep).unwrap();
            tape.scalar(ce)
        };
        let before = run(&a);
        a[3] = -50.0;
        a[4] = 123.0;
        assert_eq!(before, run(&a));
    }

    #[test]
    fn target_outside_vocab_is_contract_error() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[2, 3]));
        let err = cross_entropy(&mut tape, l, &[0, 3], &[true, true]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn symmetric_kl_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let b = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let kl = symmetric_kl(&mut tape, a, b, &[true]).unwrap();
        let expected = (0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln())
            + (0.25 * (0.25f64 / 0.5).ln() + 0.75 * (0.75f64 / 0.5).ln());
        assert!((tape.scalar(kl) - expected).abs() < 1e-15);
        // D(p||q) alone is about 0.1438; the symmetric sum is about 0.2747.
        assert!((0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln() - 0.1438).abs() < 1e-4);
        assert!((expected - 0.2747).abs() < 1e-4);
        let same = symmetric_kl(&mut tape, a, a, &[true]).unwrap();
        assert_eq!(tape.scalar(same), 0.0);
        let rev = symmetric_kl(&mut tape, b, a, &[true]).unwrap();
        assert_eq!(tape.scalar(rev), tape.scalar(kl));
        let plain = symmetric_kl_value(&[0.0, 0.0], &[0.0, 3f64.ln()], 2, &[true]).unwrap();
        assert!((plain - expected).abs() < 1e-15);
    }

    #[test]
    fn symmetric_kl_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[3, 2]));
        assert!(matches!(
            symmetric_kl(&mut tape, a, b, &[true, true]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn symmetric_kl_gradient() {
        let a = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.7).sin());
        let b = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.3).cos());
        let keep = [true, false, true];
        let report = check_gradients(&[a, b], &GradCheck::default(), |tape, x| {
            symmetric_kl(tape, x[0], x[1], &keep)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        let report = check_gradients(
            &[Tensor::from_fn(&[3, 5], |i| (i as f64).sqrt())],
            &GradCheck::default(),
            |tape, x| cross_entropy(tape, x[0], &[1, 4, 0], &keep),
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn objective_arithmetic() {
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(2.0));
        let kl = tape.constant(Tensor::scalar(0.1));
        let bal = tape.constant(Tensor::scalar(1.2));
        let dense = LossTerms {
            ce,
            kl: Some(kl),
            balancing: None,
        };
        let o = composite_objective(&mut tape, dense, 10.0, 0.01, Stage::One).unwrap();
        assert!((tape.scalar(o) - 3.0).abs() < 1e-15);
        let moe = LossTerms {
            balancing: Some(bal),
            ..dense
        };
        let o = composite_objective(&mut tape, moe, 5.0, 0.01, Stage::One).unwrap();
        assert!((tape.scalar(o) - 2.512).abs() < 1e-15);
        let o2 = composite_objective(&mut tape, moe, 5.0, 0.01, Stage::Two).unwrap();
        assert_eq!(tape.scalar(o2), 2.0 + 1.2 * 0.01);
        assert!(matches!(
            composite_objective(&mut tape, moe, -1.0, 0.01, Stage::One),
            Err(Error::Config(_))
        ));
        let again = composite_objective(&mut tape, moe, 5.0, 0.01, Stage::One).unwrap();
        assert_eq!(
            objective_value(2.0, Some(0.1), Some(1.2), 5.0, 0.01, Stage::One).unwrap(),
            tape.scalar(again)
        );
    }

    #[test]
    fn stage_serializes_as_number() {
        assert_eq!(serde_json::to_string(&Stage::Two).unwrap(), "2");
        assert_eq!(serde_json::from_str::<Stage>("1").unwrap(), Stage::One);
        assert!(serde_json::from_str::<Stage>("3").is_err());
    }
}
