//! A straight-line reimplementation of the forward pass, differentiated with
//! forward-mode dual numbers, drives a hand-written Adam. Parameters after a
//! few trainer updates must agree with it.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::ops::{Add, Div, Mul, Neg, Sub};

use onestop::data::{make_batches, Batch, Corpus, CorpusConfig, TierCounts, ToyLanguageSpec, PAD};
use onestop::model::{CompositeModel, StandaloneModel, Which};
use onestop::nn::{ModelConfig, Network};
use onestop::train::{Strategy, Trainee, Trainer, TrainerConfig};

/// Pinned agreement between the tape trainer and the reference.
const TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug)]
struct D {
    v: f64,
    d: f64,
}

fn c(v: f64) -> D {
    D { v, d: 0.0 }
}

impl Add for D {
    type Output = D;
    fn add(self, o: D) -> D {
        D { v: self.v + o.v, d: self.d + o.d }
    }
}
impl Sub for D {
    type Output = D;
    fn sub(self, o: D) -> D {
        D { v: self.v - o.v, d: self.d - o.d }
    }
}
impl Mul for D {
    type Output = D;
    fn mul(self, o: D) -> D {
        D { v: self.v * o.v, d: self.d * o.v + self.v * o.d }
    }
}
impl Div for D {
    type Output = D;
    fn div(self, o: D) -> D {
        D { v: self.v / o.v, d: (self.d * o.v - self.v * o.d) / (o.v * o.v) }
    }
}
impl Neg for D {
    type Output = D;
    fn neg(self) -> D {
        D { v: -self.v, d: -self.d }
    }
}
impl D {
    fn exp(self) -> D {
        let e = self.v.exp();
        D { v: e, d: self.d * e }
    }
    fn ln(self) -> D {
        D { v: self.v.ln(), d: self.d / self.v }
    }
    fn sqrt(self) -> D {
        let s = self.v.sqrt();
        D { v: s, d: self.d / (2.0 * s) }
    }
    fn relu(self) -> D {
        if self.v > 0.0 {
            self
        } else {
            c(0.0)
        }
    }
}

type Mat = Vec<Vec<D>>;

/// Parameter values with an optional seeded direction.
struct Ref<'a> {
    params: &'a BTreeMap<String, Vec<f64>>,
    seed: Option<(&'a str, usize)>,
    used: RefCell<BTreeSet<String>>,
}

impl Ref<'_> {
    fn p(&self, name: &str) -> Vec<D> {
        self.used.borrow_mut().insert(name.to_string());
        let vals = &self.params[name];
        vals.iter()
            .enumerate()
            .map(|(i, &v)| D {
                v,
                d: if self.seed == Some((name, i)) { 1.0 } else { 0.0 },
            })
            .collect()
    }

    fn linear(&self, prefix: &str, x: &[D]) -> Vec<D> {
        let w = self.p(&format!("{prefix}.w"));
        let b = self.p(&format!("{prefix}.b"));
        let out = b.len();
        (0..out)
            .map(|j| x.iter().enumerate().fold(b[j], |acc, (i, &xi)| acc + xi * w[i * out + j]))
            .collect()
    }

    fn norm(&self, prefix: &str, x: &[D]) -> Vec<D> {
        let g = self.p(&format!("{prefix}.gamma"));
        let b = self.p(&format!("{prefix}.beta"));
        let n = c(x.len() as f64);
        let mean = x.iter().fold(c(0.0), |a, &v| a + v) / n;
        let var = x.iter().fold(c(0.0), |a, &v| a + (v - mean) * (v - mean)) / n;
        let s = (var + c(1e-5)).sqrt();
        x.iter().zip(g.iter().zip(&b)).map(|(&v, (&g, &b))| (v - mean) / s * g + b).collect()
    }

    fn ffn(&self, prefix: &str, x: &[D]) -> Vec<D> {
        let h: Vec<D> = self.linear(&format!("{prefix}.fc1"), x).into_iter().map(D::relu).collect();
        self.linear(&format!("{prefix}.fc2"), &h)
    }

    fn attention(&self, prefix: &str, xq: &Mat, xkv: &Mat, heads: usize, visible: impl Fn(usize, usize) -> bool) -> Mat {
        let q: Mat = xq.iter().map(|x| self.linear(&format!("{prefix}.q"), x)).collect();
        let k: Mat = xkv.iter().map(|x| self.linear(&format!("{prefix}.k"), x)).collect();
        let v: Mat = xkv.iter().map(|x| self.linear(&format!("{prefix}.v"), x)).collect();
        let d = q[0].len();
        let dh = d / heads;
        let scale = c((dh as f64).sqrt());
        let mut ctx = vec![vec![c(0.0); d]; q.len()];
        for h in 0..heads {
            let r = h * dh..(h + 1) * dh;
            for i in 0..q.len() {
                let keys: Vec<usize> = (0..k.len()).filter(|&j| visible(i, j)).collect();
                let scores: Vec<D> = keys
                    .iter()
                    .map(|&j| r.clone().fold(c(0.0), |a, t| a + q[i][t] * k[j][t]) / scale)
                    .collect();
                let w = softmax(&scores);
                for (wj, &j) in w.iter().zip(&keys) {
                    for t in r.clone() {
                        ctx[i][t] = ctx[i][t] + *wj * v[j][t];
                    }
                }
            }
        }
        ctx.iter().map(|x| self.linear(&format!("{prefix}.o"), x)).collect()
    }
}

fn softmax(x: &[D]) -> Vec<D> {
    let m = c(x.iter().map(|d| d.v).fold(f64::NEG_INFINITY, f64::max));
    let e: Vec<D> = x.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(c(0.0), |a, &v| a + v);
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax(x: &[D]) -> Vec<D> {
    let m = c(x.iter().map(|d| d.v).fold(f64::NEG_INFINITY, f64::max));
    let s = x.iter().fold(c(0.0), |a, &v| a + (v - m).exp());
    let lse = s.ln() + m;
    x.iter().map(|&v| v - lse).collect()
}

fn positions(len: usize, d: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|p| {
            (0..d)
                .map(|i| {
                    let a = p as f64 / 10000f64.powf((i - i % 2) as f64 / d as f64);
                    if i % 2 == 0 {
                        a.sin()
                    } else {
                        a.cos()
                    }
                })
                .collect()
        })
        .collect()
}

/// Output of one path over a batch.
struct PathOut {
    /// `[rows][len][vocab]`
    logits: Vec<Mat>,
    balancing: Option<D>,
}

fn embed(r: &Ref, net: &Network, ids: &[usize]) -> Mat {
    let d = net.d_model;
    let table = r.p(&net.embedding);
    let pos = positions(ids.len(), d);
    ids.iter()
        .enumerate()
        .map(|(t, &id)| (0..d).map(|j| table[id * d + j] * c((d as f64).sqrt()) + c(pos[t][j])).collect())
        .collect()
}

/// Feed-forward sublayer across the whole batch, so MoE routing statistics
/// cover every kept token.
fn ffn_all(r: &Ref, block: &onestop::nn::Block, xs: &mut [Mat], keep: &[Vec<bool>], balancing: &mut Vec<D>) {
    let p = &block.prefix;
    let hs: Vec<Mat> = xs.iter().map(|x| x.iter().map(|v| r.norm(&format!("{p}.ffn_norm"), v)).collect()).collect();
    match &block.moe {
        None => {
            for (x, h) in xs.iter_mut().zip(&hs) {
                for (xt, ht) in x.iter_mut().zip(h) {
                    let y = r.ffn(&format!("{p}.ffn"), ht);
                    *xt = xt.iter().zip(&y).map(|(&a, &b)| a + b).collect();
                }
            }
        }
        Some(cfg) => {
            let e = cfg.experts;
            let router = r.p(&format!("{p}.moe.router"));
            let mut counts = vec![0usize; e];
            let mut prob_sum = vec![c(0.0); e];
            let mut n = 0;
            for (b, h) in hs.iter().enumerate() {
                for (t, ht) in h.iter().enumerate() {
                    if !keep[b][t] {
                        continue;
                    }
                    let logits: Vec<D> = (0..e)
                        .map(|k| ht.iter().enumerate().fold(c(0.0), |a, (i, &x)| a + x * router[i * e + k]))
                        .collect();
                    let probs = softmax(&logits);
                    let mut best = 0;
                    for k in 0..e {
                        if probs[k].v > probs[best].v {
                            best = k;
                        }
                    }
                    counts[best] += 1;
                    n += 1;
                    for k in 0..e {
                        prob_sum[k] = prob_sum[k] + probs[k];
                    }
                    let y = r.ffn(&format!("{p}.moe.expert{best}"), ht);
                    xs[b][t] = xs[b][t].iter().zip(&y).map(|(&a, &y)| a + y * probs[best]).collect();
                }
            }
            if n > 0 {
                let nf = n as f64;
                let bal = (0..e).fold(c(0.0), |a, k| a + c((e * counts[k]) as f64 / nf) * (prob_sum[k] / c(nf)));
                balancing.push(bal);
            }
        }
    }
}

fn forward(r: &Ref, net: &Network, b: &Batch) -> PathOut {
    let rows = b.rows;
    let src: Vec<&[usize]> = b.src.chunks(b.src_len).collect();
    let tgt: Vec<&[usize]> = b.tgt_in.chunks(b.tgt_len).collect();
    let src_keep: Vec<Vec<bool>> = src.iter().map(|s| s.iter().map(|&t| t != PAD).collect()).collect();
    let tgt_keep: Vec<Vec<bool>> = tgt.iter().map(|s| s.iter().map(|&t| t != PAD).collect()).collect();
    let mut balancing = Vec::new();

    let mut xs: Vec<Mat> = src.iter().map(|s| embed(r, net, s)).collect();
    for block in &net.encoder {
        let p = &block.prefix;
        for (x, keep) in xs.iter_mut().zip(&src_keep) {
            let h: Mat = x.iter().map(|v| r.norm(&format!("{p}.self_norm"), v)).collect();
            let a = r.attention(&format!("{p}.self_attn"), &h, &h, net.heads, |_, j| keep[j]);
            add_into(x, &a);
        }
        ffn_all(r, block, &mut xs, &src_keep, &mut balancing);
    }
    let memory: Vec<Mat> = xs
        .iter()
        .map(|x| x.iter().map(|v| r.norm(&net.encoder_norm, v)).collect())
        .collect();

    let mut ys: Vec<Mat> = tgt.iter().map(|s| embed(r, net, s)).collect();
    for block in &net.decoder {
        let p = &block.prefix;
        for i in 0..rows {
            let (tk, sk) = (&tgt_keep[i], &src_keep[i]);
            let h: Mat = ys[i].iter().map(|v| r.norm(&format!("{p}.self_norm"), v)).collect();
            let a = r.attention(&format!("{p}.self_attn"), &h, &h, net.heads, |q, j| j <= q && tk[j]);
            add_into(&mut ys[i], &a);
            let h: Mat = ys[i].iter().map(|v| r.norm(&format!("{p}.cross_norm"), v)).collect();
            let a = r.attention(&format!("{p}.cross_attn"), &h, &memory[i], net.heads, |_, j| sk[j]);
            add_into(&mut ys[i], &a);
        }
        ffn_all(r, block, &mut ys, &tgt_keep, &mut balancing);
    }
    let table = r.p(&net.embedding);
    let (v, d) = (net.vocab_size, net.d_model);
    let logits = ys
        .iter()
        .map(|y| {
            y.iter()
                .map(|yt| {
                    let h = r.norm(&net.decoder_norm, yt);
                    (0..v).map(|k| (0..d).fold(c(0.0), |a, j| a + h[j] * table[k * d + j])).collect()
                })
                .collect()
        })
        .collect();
    let balancing = balancing.into_iter().reduce(|a, b| a + b);
    PathOut { logits, balancing }
}

fn add_into(x: &mut Mat, a: &Mat) {
    for (xt, at) in x.iter_mut().zip(a) {
        for (u, &w) in xt.iter_mut().zip(at) {
            *u = *u + w;
        }
    }
}

fn kept(b: &Batch) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..b.rows {
        for t in 0..b.tgt_len {
            let target = b.tgt_out[i * b.tgt_len + t];
            if target != PAD {
                out.push((i, t, target));
            }
        }
    }
    out
}

fn cross_entropy(o: &PathOut, b: &Batch) -> D {
    let k = kept(b);
    let total = k.iter().fold(c(0.0), |a, &(i, t, y)| a - log_softmax(&o.logits[i][t])[y]);
    total / c(k.len() as f64)
}

/// Symmetric KL where only `a` carries derivatives.
fn sym_kl(a: &PathOut, b_fixed: &PathOut, batch: &Batch) -> D {
    let k = kept(batch);
    let mut total = c(0.0);
    for &(i, t, _) in &k {
        let la = log_softmax(&a.logits[i][t]);
        let lb: Vec<D> = log_softmax(&b_fixed.logits[i][t]).iter().map(|x| c(x.v)).collect();
        for (x, y) in la.iter().zip(&lb) {
            total = total + (x.exp() - y.exp()) * (*x - *y);
        }
    }
    total / c(k.len() as f64)
}

struct Setup {
    nets: Vec<(Which, Network, f64)>,
    alphas: (f64, f64),
    /// Parameter groups, each with its own Adam and clip.
    groups: Vec<Vec<String>>,
}

/// Loss of one micro-batch, differentiated along `seed`, plus the names the
/// forward pass read.
fn loss(setup: &Setup, params: &BTreeMap<String, Vec<f64>>, b: &Batch, seed: Option<(&str, usize)>) -> (D, BTreeSet<String>) {
    let r = Ref {
        params,
        seed,
        used: RefCell::new(BTreeSet::new()),
    };
    let outs: Vec<PathOut> = setup.nets.iter().map(|(_, n, _)| forward(&r, n, b)).collect();
    let objective = |o: &PathOut, coef: f64| {
        let mut x = cross_entropy(o, b);
        if let Some(bal) = o.balancing {
            x = x + c(coef) * bal;
        }
        x
    };
    let total = if outs.len() == 1 {
        objective(&outs[0], setup.nets[0].2)
    } else {
        let (ab, as_) = setup.alphas;
        let ob = objective(&outs[0], setup.nets[0].2) + c(ab) * sym_kl(&outs[0], &outs[1], b);
        let os = objective(&outs[1], setup.nets[1].2) + c(as_) * sym_kl(&outs[1], &outs[0], b);
        ob + os
    };
    (total, r.used.into_inner())
}

#[derive(Default, Clone)]
struct Moment {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

fn reference_update(
    setup: &Setup,
    params: &mut BTreeMap<String, Vec<f64>>,
    moments: &mut BTreeMap<String, Moment>,
    micro: &[Batch],
    cfg: &TrainerConfig,
    step: u64,
) {
    let total: usize = micro.iter().map(Batch::target_tokens).sum();
    let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let snapshot = params.clone();
    for b in micro {
        let w = b.target_tokens() as f64 / total as f64;
        let (_, used) = loss(setup, &snapshot, b, None);
        for name in used {
            let n = snapshot[&name].len();
            let g = grads.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (i, gi) in g.iter_mut().enumerate() {
                *gi += w * loss(setup, &snapshot, b, Some((&name, i))).0.d;
            }
        }
    }
    let warm = cfg.warmup_steps as f64;
    let lr = if (step as f64) < warm {
        cfg.peak_lr * step as f64 / warm
    } else {
        cfg.peak_lr * (warm / step as f64).sqrt()
    };
    let (b1, b2) = (cfg.adam_betas[0], cfg.adam_betas[1]);
    for group in &setup.groups {
        let norm = group
            .iter()
            .filter_map(|n| grads.get(n))
            .flat_map(|g| g.iter().map(|x| x * x))
            .sum::<f64>()
            .sqrt();
        let scale = match cfg.clip_norm {
            Some(cl) if norm > cl => cl / (norm + 1e-6),
            _ => 1.0,
        };
        for name in group {
            let Some(g) = grads.get(name) else { continue };
            let p = params.get_mut(name).unwrap();
            let mo = moments.entry(name.clone()).or_insert_with(|| Moment {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                t: 0,
            });
            mo.t += 1;
            for i in 0..p.len() {
                let gi = g[i] * scale;
                mo.m[i] = b1 * mo.m[i] + (1.0 - b1) * gi;
                mo.v[i] = b2 * mo.v[i] + (1.0 - b2) * gi * gi;
                let mh = mo.m[i] / (1.0 - b1.powi(mo.t));
                let vh = mo.v[i] / (1.0 - b2.powi(mo.t));
                p[i] -= lr * mh / (vh.sqrt() + cfg.adam_eps);
            }
        }
    }
}

fn snapshot(t: &Trainer) -> BTreeMap<String, Vec<f64>> {
    let store = t.model().params();
    store.names().map(|n| (n.to_string(), store.get(n).unwrap().data().to_vec())).collect()
}

fn batches() -> Vec<Batch> {
    let corpus = Corpus::generate(&CorpusConfig {
        languages: ToyLanguageSpec::default_set()[..1].to_vec(),
        vocab_size: 12,
        min_len: 2,
        max_len: 4,
        tiers: TierCounts {
            high: 30,
            medium: 0,
            low: 0,
        },
        valid_per_language: 2,
        test_per_language: 2,
        seed: 4,
    })
    .unwrap();
    make_batches(&corpus.train, 24, 9).unwrap()
}

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        ffn_size: 3,
        ..ModelConfig::dense(12, 4, 2, layers)
    }
}

fn config(strategy: Strategy) -> TrainerConfig {
    let mut cfg = TrainerConfig::new(strategy);
    cfg.peak_lr = 0.01;
    cfg.warmup_steps = 2;
    cfg.clip_norm = Some(0.5);
    // Mathematically zero gradients (key biases) carry rounding noise that
    // Adam would otherwise blow up to full-size steps.
    cfg.adam_eps = 1e-6;
    cfg
}

fn check(mut trainer: Trainer, setup: Setup, updates: &[&[Batch]]) {
    let cfg = trainer.config().clone();
    let mut params = snapshot(&trainer);
    let mut moments = BTreeMap::new();
    for (k, micro) in updates.iter().enumerate() {
        trainer.update(micro).unwrap();
        reference_update(&setup, &mut params, &mut moments, micro, &cfg, k as u64 + 1);
        let got = snapshot(&trainer);
        let mut worst = (0.0, String::new());
        for (name, want) in &params {
            for (a, b) in got[name].iter().zip(want) {
                let err = (a - b).abs() / b.abs().max(1.0);
                if err > worst.0 {
                    worst = (err, name.clone());
                }
            }
        }
        assert!(worst.0 <= TOL, "update {}: {} off by {:e}", k + 1, worst.1, worst.0);
    }
}

#[test]
fn single_dense_model_matches_reference() {
    let cfg = tiny(1);
    let m = StandaloneModel::new(&cfg, Which::Small, 3).unwrap();
    let setup = Setup {
        nets: vec![(Which::Small, m.network().clone(), 0.0)],
        alphas: (0.0, 0.0),
        groups: vec![m.network().param_names()],
    };
    let mut tc = config(Strategy::Single);
    tc.single_target = Which::Small;
    let trainer = Trainer::new(tc, Trainee::Single(m)).unwrap();
    let b = batches();
    check(trainer, setup, &[&b[0..2], &b[2..3], &b[3..4]]);
}

#[test]
fn shared_composite_stage_one_matches_reference() {
    let big = tiny(2).with_moe(2);
    let small = tiny(1);
    let tc = config(Strategy::ConstJT);
    let c = CompositeModel::build_shared(&big, &small, 5).unwrap();
    let coef = big.moe.as_ref().unwrap().balancing_coef;
    let setup = Setup {
        nets: vec![
            (Which::Big, c.network(Which::Big).clone(), coef),
            (Which::Small, c.network(Which::Small).clone(), 0.0),
        ],
        alphas: (tc.alpha_big, tc.alpha_small),
        groups: vec![c.params().names().map(str::to_string).collect()],
    };
    let trainer = Trainer::new(tc, Trainee::Composite(c)).unwrap();
    let b = batches();
    check(trainer, setup, &[&b[0..1], &b[1..3]]);
}

#[test]
fn indep_composite_with_two_optimizers_matches_reference() {
    let big = tiny(2).with_moe(2);
    let small = tiny(1);
    let tc = config(Strategy::ConstJT);
    let c = CompositeModel::build_indep(&big, Some(&small), 6).unwrap();
    let coef = big.moe.as_ref().unwrap().balancing_coef;
    let setup = Setup {
        nets: vec![
            (Which::Big, c.network(Which::Big).clone(), coef),
            (Which::Small, c.network(Which::Small).clone(), 0.0),
        ],
        alphas: (tc.alpha_big, tc.alpha_small),
        groups: vec![c.reachable(Which::Big), c.reachable(Which::Small)],
    };
    let trainer = Trainer::new(tc, Trainee::Composite(c)).unwrap();
    let b = batches();
    check(trainer, setup, &[&b[0..2], &b[2..4]]);
}
