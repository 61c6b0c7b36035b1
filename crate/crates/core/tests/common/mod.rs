//! Helpers shared by the integration tests and the acceptance harness.
#![allow(dead_code)]

use onestop::data::{make_batches, Batch, Corpus, CorpusConfig, TierCounts, ToyLanguageSpec};
use onestop::loss::{composite_objective, cross_entropy, symmetric_kl, LossTerms, Stage};
use onestop::model::{Architecture, CompositeModel, ParameterStore, StandaloneModel, Which};
use onestop::nn::{scaled_dot_product_attention, AttnMask, Forward, ModelConfig, Network};
use onestop::tensor::gradcheck::{check_gradients, central_difference, GradCheck, GradReport};
use onestop::{Result, Tape, Tensor, Var};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_corpus(vocab: usize, seed: u64) -> Corpus {
    Corpus::generate(&CorpusConfig {
        languages: ToyLanguageSpec::default_set(),
        vocab_size: vocab,
        min_len: 2,
        max_len: 5,
        tiers: TierCounts {
            high: 40,
            medium: 20,
            low: 8,
        },
        valid_per_language: 4,
        test_per_language: 4,
        seed,
    })
    .unwrap()
}

pub fn batches(c: &Corpus, budget: usize, seed: u64) -> Vec<Batch> {
    make_batches(&c.train, budget, seed).unwrap()
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in [-1, 1] kept at least 0.05 away from zero, so kinks stay out
/// of reach of the finite-difference step.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_range(0.0..1.0) < 0.5 {
            -m
        } else {
            m
        }
    })
}

type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// Finite-difference reports for every differentiable tape operation and the
/// losses built from them.
pub fn op_gradchecks(cfg: &GradCheck) -> Vec<(&'static str, GradReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let r = &mut rng;
    let mask: Vec<bool> = (0..12).map(|i| i % 5 == 1).collect();
    let keep4 = vec![true, false, true, true];
    let cases: Vec<(&'static str, Vec<Tensor>, OpFn)> = vec![
        ("add", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![uniform(&[5], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.scale(v[0], 1.7)))),
        ("div_scalar", vec![uniform(&[5], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.div_scalar(v[0], 2.3)))),
        ("relu", vec![off_zero(&[3, 4], r)], Box::new(|t, v| Ok(t.relu(v[0])))),
        ("exp", vec![uniform(&[6], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.exp(v[0])))),
        ("log", vec![uniform(&[6], 0.5, 2.0, r)], Box::new(|t, v| Ok(t.log(v[0])))),
        ("masked_fill", vec![uniform(&[3, 4], -1.0, 1.0, r)], Box::new(move |t, v| t.masked_fill(v[0], mask.clone(), -3.0))),
        ("matmul", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("matmul_bt", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[5, 4], -1.0, 1.0, r)], Box::new(|t, v| t.matmul_ex(v[0], v[1], true))),
        ("batch_matmul", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 4, 5], -1.0, 1.0, r)], Box::new(|t, v| t.batch_matmul(v[0], v[1], false))),
        ("batch_matmul_bt", vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 5, 4], -1.0, 1.0, r)], Box::new(|t, v| t.batch_matmul(v[0], v[1], true))),
        ("softmax", vec![uniform(&[2, 3, 4], -2.0, 2.0, r)], Box::new(|t, v| t.softmax(v[0], 1))),
        ("log_softmax", vec![uniform(&[2, 3, 4], -2.0, 2.0, r)], Box::new(|t, v| t.log_softmax(v[0], 2))),
        (
            "layer_norm",
            vec![uniform(&[3, 5], -1.0, 1.0, r), uniform(&[5], 0.5, 1.5, r), uniform(&[5], -0.5, 0.5, r)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("select_rows", vec![uniform(&[5, 3], -1.0, 1.0, r)], Box::new(|t, v| t.select_rows(v[0], &[4, 0, 4, 2]))),
        ("scatter_rows", vec![uniform(&[3, 2], -1.0, 1.0, r)], Box::new(|t, v| t.scatter_rows(v[0], &[4, 1, 0], 5))),
        ("scale_rows", vec![uniform(&[3, 4], -1.0, 1.0, r), uniform(&[3], -1.0, 1.0, r)], Box::new(|t, v| t.scale_rows(v[0], v[1]))),
        ("pick", vec![uniform(&[3, 5], -1.0, 1.0, r)], Box::new(|t, v| t.pick(v[0], &[1, 4, 0]))),
        ("reshape", vec![uniform(&[3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("permute", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.transpose(v[0]))),
        ("concat", vec![uniform(&[2, 3], -1.0, 1.0, r), uniform(&[2, 2], -1.0, 1.0, r)], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("sum_axis", vec![uniform(&[2, 3, 4], -1.0, 1.0, r)], Box::new(|t, v| t.sum_axis(v[0], 1))),
        ("sum", vec![uniform(&[7], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.sum(v[0])))),
        ("mean", vec![uniform(&[7], -1.0, 1.0, r)], Box::new(|t, v| Ok(t.mean(v[0])))),
        ("weighted_sum", vec![uniform(&[4], -1.0, 1.0, r)], Box::new(|t, v| t.weighted_sum(v[0], vec![0.5, -1.0, 2.0, 0.25]))),
        ("masked_sum", vec![uniform(&[4], -1.0, 1.0, r)], Box::new({
            let k = keep4.clone();
            move |t, v| t.masked_sum(v[0], &k)
        })),
        ("masked_mean", vec![uniform(&[4], -1.0, 1.0, r)], Box::new({
            let k = keep4.clone();
            move |t, v| t.masked_mean(v[0], &k)
        })),
        (
            "attention",
            vec![uniform(&[2, 3, 4], -1.0, 1.0, r), uniform(&[2, 5, 4], -1.0, 1.0, r), uniform(&[2, 5, 4], -1.0, 1.0, r)],
            Box::new(|t, v| {
                let keep = [true, true, true, false, false, true, true, true, true, true];
                let mask = AttnMask::padding(&keep, 2, 3);
                scaled_dot_product_attention(t, v[0], v[1], v[2], Some(&mask), 2)
            }),
        ),
        ("cross_entropy", vec![uniform(&[4, 5], -2.0, 2.0, r)], Box::new({
            let k = keep4.clone();
            move |t, v| cross_entropy(t, v[0], &[1, 0, 4, 2], &k)
        })),
        ("symmetric_kl", vec![uniform(&[4, 5], -2.0, 2.0, r), uniform(&[4, 5], -2.0, 2.0, r)], Box::new({
            let k = keep4.clone();
            move |t, v| symmetric_kl(t, v[0], v[1], &k)
        })),
        (
            "composite_objective",
            vec![uniform(&[], 0.5, 2.0, r), uniform(&[], 0.0, 1.0, r), uniform(&[], 0.5, 2.0, r)],
            Box::new(|t, v| {
                let terms = LossTerms {
                    ce: v[0],
                    kl: Some(v[1]),
                    balancing: Some(v[2]),
                };
                composite_objective(t, terms, 5.0, 0.01, Stage::One)
            }),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, f)| (name, check_gradients(&inputs, cfg, |t, v| f(t, v)).unwrap()))
        .collect()
}

/// The models whose whole-network gradients are checked: a standalone
/// 2-layer encoder-decoder with one expert layer per stack (E=2), and both
/// composite architectures built around it.
#[allow(clippy::large_enum_variant)]
pub enum GradModel {
    Standalone(StandaloneModel),
    Composite(CompositeModel),
}

impl GradModel {
    pub fn params(&self) -> &ParameterStore {
        match self {
            GradModel::Standalone(m) => &m.params,
            GradModel::Composite(c) => c.params(),
        }
    }

    fn networks(&self) -> Vec<&Network> {
        match self {
            GradModel::Standalone(m) => vec![m.network()],
            GradModel::Composite(c) => vec![c.network(Which::Big), c.network(Which::Small)],
        }
    }
}

pub fn grad_models() -> Vec<(&'static str, GradModel)> {
    let big = ModelConfig {
        ffn_size: 6,
        ..ModelConfig::dense(16, 4, 2, 2).with_moe(2)
    };
    let small = ModelConfig {
        ffn_size: 6,
        ..ModelConfig::dense(16, 4, 2, 1)
    };
    vec![
        ("standalone", GradModel::Standalone(StandaloneModel::new(&big, Which::Big, 21).unwrap())),
        ("shared", GradModel::Composite(CompositeModel::build_shared(&big, &small, 22).unwrap())),
        ("indep", GradModel::Composite(CompositeModel::build_indep(&big, None, 23).unwrap())),
    ]
}

/// Cross-entropy of every path plus weighted balancing, plus the symmetric
/// KL between the two paths of a composite (both sides differentiated).
fn model_loss(tape: &mut Tape, nets: &[&Network], params: &ParameterStore, b: &Batch) -> Result<Var> {
    let keep = b.target_keep();
    let mut outs = Vec::new();
    let mut total: Option<Var> = None;
    for net in nets {
        let out = {
            let mut fwd = Forward::new(tape, params);
            net.forward(&mut fwd, &b.src, &b.tgt_in, b.rows)?
        };
        let ce = cross_entropy(tape, out.logits, &b.tgt_out, &keep)?;
        let terms = LossTerms {
            ce,
            kl: None,
            balancing: out.balancing,
        };
        let o = composite_objective(tape, terms, 0.0, 0.5, Stage::Two)?;
        total = Some(match total {
            None => o,
            Some(t) => tape.add(t, o)?,
        });
        outs.push(out.logits);
    }
    let mut total = total.unwrap();
    if outs.len() == 2 {
        let kl = symmetric_kl(tape, outs[0], outs[1], &keep)?;
        let kl = tape.scale(kl, 3.0);
        total = tape.add(total, kl)?;
    }
    Ok(total)
}

/// Central differences against the tape for every parameter entry.
pub fn model_gradcheck(model: &GradModel, b: &Batch, cfg: &GradCheck) -> GradReport {
    let nets = model.networks();
    let mut tape = Tape::new();
    let loss = model_loss(&mut tape, &nets, model.params(), b).unwrap();
    tape.backward(loss).unwrap();
    let mut store = model.params().clone();
    store.accumulate_grads(&tape).unwrap();

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut probe = model.params().clone();
    let mut report = GradReport::default();
    for (i, name) in names.iter().enumerate() {
        let t = store.get(name).unwrap();
        let analytic = t.grad().map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec);
        for (j, &a) in analytic.iter().enumerate() {
            let x0 = probe.get(name).unwrap().data()[j];
            let numeric = central_difference(x0, cfg.step, |x| {
                probe.get_mut(name).unwrap().data_mut()[j] = x;
                let mut tape = Tape::no_grad();
                let l = model_loss(&mut tape, &nets, &probe, b)?;
                Ok(tape.scalar(l))
            })
            .unwrap();
            probe.get_mut(name).unwrap().data_mut()[j] = x0;
            report.record(cfg, i, j, a, numeric);
        }
    }
    report
}

/// A batch for whole-model checks: several rows with padding.
pub fn grad_batch() -> Batch {
    let c = small_corpus(16, 3);
    let bs = batches(&c, 30, 2);
    bs.into_iter().find(|b| b.rows >= 3).unwrap()
}

pub fn architecture_name(a: Option<Architecture>) -> String {
    a.map_or_else(|| "single".to_string(), |a| a.to_string())
}

/// Feeds `kls` (one per update, steps from 1) through a [`StageControl`] and
/// returns the switch step plus whether the stage ever went back to one.
pub fn drive_control(kls: &[f64], decay: f64, interval: u64, t_sep: f64) -> (Option<u64>, bool) {
    let mut c = onestop::train::StageControl::new(decay, interval, Some(t_sep));
    let mut reversed = false;
    for (i, &kl) in kls.iter().enumerate() {
        let before = c.stage;
        c.observe(kl);
        c.maybe_switch(i as u64 + 1);
        reversed |= before == Stage::Two && c.stage == Stage::One;
    }
    (c.switch_step, reversed)
}

/// The switch step computed directly: the first multiple of `interval`
/// whose running average is at or below `t_sep`.
pub fn expected_switch(kls: &[f64], decay: f64, interval: u64, t_sep: f64) -> Option<u64> {
    let mut ema = kls[0];
    for (i, &kl) in kls.iter().enumerate() {
        if i > 0 {
            ema = decay * ema + (1.0 - decay) * kl;
        }
        let step = i as u64 + 1;
        if step.is_multiple_of(interval.max(1)) && ema <= t_sep {
            return Some(step);
        }
    }
    None
}
