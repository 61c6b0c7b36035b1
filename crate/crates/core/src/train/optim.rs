use std::collections::BTreeMap;

use crate::model::ParameterStore;

/// One Adam step with bias correction on a flat parameter. `t` is the
/// 1-based step count of this parameter.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr * mh / (vh.sqrt() + eps);
    }
}

/// Adam moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// Adam over a fixed, sorted set of parameter names in a store. Parameters
/// without a gradient are skipped and keep their step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub betas: (f64, f64),
    pub eps: f64,
    names: Vec<String>,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(mut names: Vec<String>, betas: (f64, f64), eps: f64) -> Self {
        names.sort();
        names.dedup();
        Self {
            betas,
            eps,
            names,
            state: BTreeMap::new(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn moments(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }

    pub fn iter_moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.state.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_moments(&mut self, name: &str, m: Moments) {
        self.state.insert(name.to_string(), m);
    }

    /// L2 norm over every gradient this optimizer owns.
    pub fn grad_norm(&self, store: &ParameterStore) -> f64 {
        let mut sq = 0.0;
        for n in &self.names {
            if let Some(g) = store.get(n).and_then(|t| t.grad()) {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        sq.sqrt()
    }

    /// Clips gradients to global norm `clip` (if given), then applies one
    /// update. Returns the norm before clipping.
    pub fn step(&mut self, store: &mut ParameterStore, lr: f64, clip: Option<f64>) -> f64 {
        let norm = self.grad_norm(store);
        let scale = match clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        for n in &self.names {
            let Some(t) = store.get_mut(n) else { continue };
            let Some(g) = t.grad() else { continue };
            let g: Vec<f64> = if scale == 1.0 {
                g.to_vec()
            } else {
                g.iter().map(|x| x * scale).collect()
            };
            let mo = self
                .state
                .entry(n.clone())
                .or_insert_with(|| Moments::zeros(g.len()));
            mo.t += 1;
            adam_update(t.data_mut(), &g, &mut mo.m, &mut mo.v, mo.t, lr, self.betas, self.eps);
        }
        norm
    }
}
