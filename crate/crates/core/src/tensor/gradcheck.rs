//! Central finite-difference checks against tape gradients.

use super::{Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation applied on each side of the evaluation point.
    pub step: f64,
    pub rtol: f64,
    /// Lower bound on the magnitude used to scale the tolerance, so that
    /// gradients near zero are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-3,
            floor: 1e-3,
        }
    }
}

impl GradCheck {
    pub fn agrees(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.rtol * analytic.abs().max(numeric.abs()).max(self.floor)
    }

    pub fn rel_err(&self, analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(self.floor)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<Mismatch>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.failures.is_empty()
    }

    pub fn record(&mut self, cfg: &GradCheck, input: usize, index: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_rel_err = self.max_rel_err.max(cfg.rel_err(analytic, numeric));
        if !cfg.agrees(analytic, numeric) {
            self.failures.push(Mismatch {
                input,
                index,
                analytic,
                numeric,
            });
        }
    }

    pub fn merge(&mut self, other: GradReport) {
        self.checked += other.checked;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
        self.failures.extend(other.failures);
    }
}

/// `(f(x + h) - f(x - h)) / 2h`.
pub fn central_difference(x: f64, h: f64, mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let up = f(x + h)?;
    let down = f(x - h)?;
    Ok((up - down) / (2.0 * h))
}

/// Fixed weights in [0.5, 1.5) used to reduce a non-scalar output to a scalar,
/// so every output element contributes with a distinct coefficient.
pub fn reduction_weights(n: usize) -> Vec<f64> {
    (0..n as u64)
        .map(|i| {
            let mut z = i.wrapping_add(0x9e37_79b9_7f4a_7c15);
            z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            z ^= z >> 31;
            0.5 + (z >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn reduce(tape: &mut Tape, out: Var) -> Result<Var> {
    let n = tape.value(out).len();
    if n == 1 {
        return Ok(out);
    }
    tape.weighted_sum(out, reduction_weights(n))
}

/// Checks the tape gradient of `f` with respect to every element of every
/// input. Non-scalar outputs are reduced with [`reduction_weights`].
pub fn check_gradients<F>(inputs: &[Tensor], cfg: &GradCheck, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = reduce(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&mut tape, &vars)?;
        let loss = reduce(&mut tape, out)?;
        Ok(tape.scalar(loss))
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &g) in grads.iter().enumerate() {
            let x0 = probe[i].data()[j];
            let numeric = central_difference(x0, cfg.step, |x| {
                probe[i].data_mut()[j] = x;
                eval(&probe)
            })?;
            probe[i].data_mut()[j] = x0;
            report.record(cfg, i, j, g, numeric);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let cfg = GradCheck::default();
        let mut r = GradReport::default();
        r.record(&cfg, 0, 0, 1.0, 1.0005);
        assert!(r.passed());
        r.record(&cfg, 0, 1, 1.0, 1.01);
        assert!(!r.passed());
        assert_eq!(r.failures[0].index, 1);
    }

    #[test]
    fn weights_are_fixed_and_in_range() {
        let w = reduction_weights(100);
        assert_eq!(w, reduction_weights(100));
        assert!(w.iter().all(|&x| (0.5..1.5).contains(&x)));
    }
}
