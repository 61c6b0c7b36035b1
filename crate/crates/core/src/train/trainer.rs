use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::log::{EvalRecord, LogRecord, UpdateRecord};
use super::optim::{Adam, Moments};
use super::schedule::{lr_schedule, StageControl};
use super::{Strategy, TrainerConfig};
use crate::data::{evaluate, make_batches, Batch, Pair, Smoothing};
use crate::error::{Error, Result};
use crate::loss::{composite_objective, cross_entropy, symmetric_kl, symmetric_kl_value, LossTerms, Stage};
use crate::model::checkpoint::{Archive, Record};
use crate::model::{Architecture, CompositeModel, ParameterStore, StandaloneModel, Which};
use crate::nn::{Forward, ModelConfig, Network};
use crate::tensor::{Tape, Tensor, Var};

/// What a trainer optimizes.
#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Trainee {
    Single(StandaloneModel),
    Composite(CompositeModel),
}

impl Trainee {
    pub fn params(&self) -> &ParameterStore {
        match self {
            Trainee::Single(m) => &m.params,
            Trainee::Composite(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> &mut ParameterStore {
        match self {
            Trainee::Single(m) => &mut m.params,
            Trainee::Composite(c) => c.params_mut(),
        }
    }

    /// The paths this trainee trains.
    pub fn paths(&self) -> Vec<Which> {
        match self {
            Trainee::Single(m) => vec![m.which()],
            Trainee::Composite(_) => Which::ALL.to_vec(),
        }
    }

    pub fn network(&self, which: Which) -> Option<&Network> {
        match self {
            Trainee::Single(m) => (m.which() == which).then(|| m.network()),
            Trainee::Composite(c) => Some(c.network(which)),
        }
    }

    pub fn architecture(&self) -> Option<Architecture> {
        match self {
            Trainee::Single(_) => None,
            Trainee::Composite(c) => Some(c.architecture()),
        }
    }

    pub fn to_archive(&self) -> Archive {
        match self {
            Trainee::Single(m) => m.to_archive(),
            Trainee::Composite(c) => c.to_archive(),
        }
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        match a.manifest.get("kind").and_then(Value::as_str) {
            Some("composite") => Ok(Trainee::Composite(CompositeModel::from_archive(a, path)?)),
            Some("standalone") => Ok(Trainee::Single(StandaloneModel::from_archive(a, path)?)),
            _ => Err(Error::format(path, "archive does not hold a model")),
        }
    }
}

/// Everything besides parameters and optimizer moments that a resumed run
/// needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
    /// Updates already taken in the current epoch.
    pub update_in_epoch: usize,
    pub control: StageControl,
    /// Records emitted so far, not counting any header written by the caller.
    pub records: u64,
    pub last_eval_step: Option<u64>,
    pub finished: bool,
    /// Word positions of the per-path dropout streams.
    rng_words: [String; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateOutcome {
    pub record: UpdateRecord,
    pub switched: bool,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct RunOptions<'a> {
    /// Validation pairs scored at every epoch end.
    pub valid: Option<&'a [Pair]>,
    /// Trainer checkpoint written at epoch ends, at the switch, at the end
    /// and every `checkpoint_every` updates.
    pub checkpoint: Option<&'a Path>,
    pub checkpoint_every: Option<u64>,
    /// Save and return after this many total updates.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Finished,
    Stopped,
}

/// Groups consecutive micro-batches into updates of at least
/// `tokens_per_update` target tokens; the last group may be smaller.
pub fn plan_updates(batches: Vec<Batch>, tokens_per_update: usize) -> Vec<Vec<Batch>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    let mut tokens = 0;
    for b in batches {
        tokens += b.target_tokens();
        cur.push(b);
        if tokens >= tokens_per_update {
            out.push(std::mem::take(&mut cur));
            tokens = 0;
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn dropout_rng(seed: u64, which: Which) -> ChaCha8Rng {
    let salt = match which {
        Which::Big => 0x5ee7_b16b_0000_0001,
        Which::Small => 0x5ee7_5a11_0000_0002,
    };
    ChaCha8Rng::seed_from_u64(seed ^ salt)
}

fn slot(which: Which) -> usize {
    match which {
        Which::Big => 0,
        Which::Small => 1,
    }
}

struct PathOut {
    logits: Var,
    ce: Var,
    balancing: Option<Var>,
}

fn path_forward(
    tape: &mut Tape,
    net: &Network,
    params: &ParameterStore,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    b: &Batch,
    keep: &[bool],
) -> Result<PathOut> {
    let mut fwd = Forward::new(tape, params).with_dropout(dropout, rng);
    let out = net.forward(&mut fwd, &b.src, &b.tgt_in, b.rows)?;
    let ce = cross_entropy(tape, out.logits, &b.tgt_out, keep)?;
    Ok(PathOut {
        logits: out.logits,
        ce,
        balancing: out.balancing,
    })
}

fn balancing_coef(cfg: &ModelConfig) -> f64 {
    cfg.moe.as_ref().map_or(0.0, |m| m.balancing_coef)
}

#[derive(Default)]
struct Sums {
    ce: [Option<f64>; 2],
    kl: Option<f64>,
    balancing: Option<f64>,
}

fn add_to(slot: &mut Option<f64>, v: f64, w: f64) {
    *slot = Some(slot.unwrap_or(0.0) + w * v);
}

#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainerConfig,
    model: Trainee,
    opts: Vec<Adam>,
    state: TrainState,
    rngs: [ChaCha8Rng; 2],
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, model: Trainee) -> Result<Self> {
        cfg.validate()?;
        match (&model, cfg.strategy) {
            (Trainee::Single(m), Strategy::Single) => {
                if m.which() != cfg.single_target {
                    return Err(Error::config(format!(
                        "single run targets {} but the model is {}",
                        cfg.single_target,
                        m.which()
                    )));
                }
            }
            (Trainee::Composite(_), Strategy::ConstJT | Strategy::TSJT) => {}
            (Trainee::Composite(_), Strategy::Single) => {
                return Err(Error::config("strategy single trains one model, not a composite"))
            }
            (Trainee::Single(_), s) => {
                return Err(Error::config(format!("strategy {s} needs a composite model")))
            }
        }
        let (b1, b2) = (cfg.adam_betas[0], cfg.adam_betas[1]);
        let all = |m: &Trainee| m.params().names().map(str::to_string).collect::<Vec<_>>();
        let opts = match &model {
            Trainee::Composite(c) if c.architecture() == Architecture::Indep => Which::ALL
                .iter()
                .map(|&w| Adam::new(c.reachable(w), (b1, b2), cfg.adam_eps))
                .collect(),
            m => vec![Adam::new(all(m), (b1, b2), cfg.adam_eps)],
        };
        let control = StageControl::new(cfg.kl_ema_decay, cfg.switch_check_interval, cfg.t_sep);
        let rngs = [dropout_rng(cfg.seed, Which::Big), dropout_rng(cfg.seed, Which::Small)];
        Ok(Self {
            state: TrainState {
                step: 0,
                epoch: 0,
                update_in_epoch: 0,
                control,
                records: 0,
                last_eval_step: None,
                finished: false,
                rng_words: ["0".into(), "0".into()],
            },
            cfg,
            model,
            opts,
            rngs,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Trainee {
        &self.model
    }

    pub fn into_model(self) -> Trainee {
        self.model
    }

    pub fn optimizers(&self) -> &[Adam] {
        &self.opts
    }

    pub fn stage(&self) -> Stage {
        self.state.control.stage
    }

    /// One optimizer update over the given micro-batches, each weighted by
    /// its share of target tokens.
    pub fn update(&mut self, micro: &[Batch]) -> Result<UpdateOutcome> {
        let total: usize = micro.iter().map(Batch::target_tokens).sum();
        if total == 0 {
            return Err(Error::contract("an update needs at least one target token"));
        }
        let step = self.state.step + 1;
        let lr = lr_schedule(step, self.cfg.peak_lr, self.cfg.warmup_steps);
        let stage = self.state.control.stage;
        self.model.params_mut().zero_grads();
        let mut sums = Sums::default();

        for b in micro {
            let w = b.target_tokens() as f64 / total as f64;
            let keep = b.target_keep();
            let mut tape = Tape::new();
            let loss = match &self.model {
                Trainee::Single(m) => {
                    let which = m.which();
                    let cfg = &m.submodel.config;
                    let p = path_forward(
                        &mut tape,
                        m.network(),
                        &m.params,
                        cfg.dropout,
                        &mut self.rngs[slot(which)],
                        b,
                        &keep,
                    )?;
                    add_to(&mut sums.ce[slot(which)], tape.scalar(p.ce), w);
                    if let Some(bal) = p.balancing {
                        add_to(&mut sums.balancing, tape.scalar(bal), w);
                    }
                    let terms = LossTerms {
                        ce: p.ce,
                        kl: None,
                        balancing: p.balancing,
                    };
                    composite_objective(&mut tape, terms, 0.0, balancing_coef(cfg), stage)?
                }
                Trainee::Composite(c) => {
                    let [rb, rs] = &mut self.rngs;
                    let (cb, cs) = (&c.submodel(Which::Big).config, &c.submodel(Which::Small).config);
                    let pb = path_forward(&mut tape, c.network(Which::Big), c.params(), cb.dropout, rb, b, &keep)?;
                    let ps = path_forward(&mut tape, c.network(Which::Small), c.params(), cs.dropout, rs, b, &keep)?;
                    add_to(&mut sums.ce[0], tape.scalar(pb.ce), w);
                    add_to(&mut sums.ce[1], tape.scalar(ps.ce), w);
                    if let Some(bal) = pb.balancing {
                        add_to(&mut sums.balancing, tape.scalar(bal), w);
                    }
                    // Each path sees the other's distribution as a fixed target.
                    let (kl_b, kl_s) = if stage == Stage::One {
                        let s_fixed = tape.detach(ps.logits);
                        let kb = symmetric_kl(&mut tape, pb.logits, s_fixed, &keep)?;
                        let b_fixed = tape.detach(pb.logits);
                        let ks = symmetric_kl(&mut tape, b_fixed, ps.logits, &keep)?;
                        add_to(&mut sums.kl, tape.scalar(kb), w);
                        (Some(kb), Some(ks))
                    } else {
                        let v = c.network(Which::Big).vocab_size;
                        let kl = symmetric_kl_value(tape.value(pb.logits), tape.value(ps.logits), v, &keep)?;
                        add_to(&mut sums.kl, kl, w);
                        (None, None)
                    };
                    let ob = composite_objective(
                        &mut tape,
                        LossTerms {
                            ce: pb.ce,
                            kl: kl_b,
                            balancing: pb.balancing,
                        },
                        self.cfg.alpha_big,
                        balancing_coef(cb),
                        stage,
                    )?;
                    let os = composite_objective(
                        &mut tape,
                        LossTerms {
                            ce: ps.ce,
                            kl: kl_s,
                            balancing: ps.balancing,
                        },
                        self.cfg.alpha_small,
                        balancing_coef(cs),
                        stage,
                    )?;
                    tape.add(ob, os)?
                }
            };
            let loss = tape.scale(loss, w);
            if !tape.scalar(loss).is_finite() {
                return Err(self.non_finite(step, &sums));
            }
            tape.backward(loss)?;
            self.model.params_mut().accumulate_grads(&tape)?;
        }
        if [sums.ce[0], sums.ce[1], sums.kl, sums.balancing]
            .iter()
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(self.non_finite(step, &sums));
        }

        // Big path first when the paths have separate optimizers.
        for opt in &mut self.opts {
            opt.step(self.model.params_mut(), lr, self.cfg.clip_norm);
        }
        self.model.params_mut().zero_grads();

        let mut switched = false;
        if let (Trainee::Composite(_), Some(kl)) = (&self.model, sums.kl) {
            self.state.control.observe(kl);
            if self.cfg.strategy == Strategy::TSJT {
                switched = self.state.control.maybe_switch(step);
            }
        }
        self.state.step = step;
        Ok(UpdateOutcome {
            record: UpdateRecord {
                step,
                stage,
                lr,
                ce_big: sums.ce[0],
                ce_small: sums.ce[1],
                kl: sums.kl,
                balancing: sums.balancing,
                kl_ema: self.state.control.kl_ema,
            },
            switched,
        })
    }

    fn non_finite(&self, step: u64, s: &Sums) -> Error {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| x.to_string());
        Error::NonFinite {
            step,
            details: format!(
                "ce_big={} ce_small={} kl={} balancing={}",
                f(s.ce[0]),
                f(s.ce[1]),
                f(s.kl),
                f(s.balancing)
            ),
        }
    }

    fn emit(&mut self, sink: &mut dyn FnMut(&LogRecord) -> Result<()>, r: LogRecord) -> Result<()> {
        sink(&r)?;
        self.state.records += 1;
        Ok(())
    }

    /// Scores every trained path on `pairs`.
    pub fn evaluate(&self, pairs: &[Pair]) -> Result<Vec<(Which, crate::data::EvalScores)>> {
        self.model
            .paths()
            .into_iter()
            .map(|w| {
                let net = self.model.network(w).expect("trained path has a network");
                Ok((w, evaluate(net, self.model.params(), pairs, Smoothing::None)?))
            })
            .collect()
    }

    fn eval_and_emit(&mut self, valid: Option<&[Pair]>, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        let Some(valid) = valid else { return Ok(()) };
        for (w, s) in self.evaluate(valid)? {
            let r = EvalRecord::new(self.state.step, self.state.epoch, w, &s);
            self.emit(sink, LogRecord::Eval(r))?;
        }
        self.state.last_eval_step = Some(self.state.step);
        Ok(())
    }

    fn finish_epoch(&mut self, opts: &RunOptions, sink: &mut dyn FnMut(&LogRecord) -> Result<()>) -> Result<()> {
        self.state.epoch += 1;
        self.state.update_in_epoch = 0;
        let c = &mut self.state.control;
        if self.cfg.strategy == Strategy::TSJT && c.t_sep.is_none() && self.state.epoch == 1 {
            c.t_sep = c.kl_ema.map(|e| 0.5 * e);
        }
        let r = LogRecord::EpochEnd {
            epoch: self.state.epoch,
            step: self.state.step,
            kl_ema: c.kl_ema,
            t_sep: c.t_sep,
        };
        self.emit(sink, r)?;
        self.eval_and_emit(opts.valid, sink)?;
        self.checkpoint(opts)
    }

    fn checkpoint(&mut self, opts: &RunOptions) -> Result<()> {
        match opts.checkpoint {
            Some(p) => self.save(p),
            None => Ok(()),
        }
    }

    /// Trains until `max_epochs` (or `max_updates`) are done, passing every
    /// record to `sink`. Resumes where a loaded trainer left off.
    pub fn run(
        &mut self,
        train: &[Pair],
        opts: &RunOptions,
        sink: &mut dyn FnMut(&LogRecord) -> Result<()>,
    ) -> Result<RunOutcome> {
        if self.state.finished {
            return Ok(RunOutcome::Finished);
        }
        let capped = |s: &Self| s.cfg.max_updates.is_some_and(|m| s.state.step >= m);
        'epochs: while self.state.epoch < self.cfg.max_epochs && !capped(self) {
            let batches = make_batches(train, self.cfg.batch_tokens, epoch_seed(self.cfg.seed, self.state.epoch))?;
            let plan = plan_updates(batches, self.cfg.tokens_per_update);
            while self.state.update_in_epoch < plan.len() {
                let out = self.update(&plan[self.state.update_in_epoch])?;
                self.state.update_in_epoch += 1;
                self.emit(sink, LogRecord::Update(out.record))?;
                let step = self.state.step;
                if out.switched {
                    let c = &self.state.control;
                    let r = LogRecord::Switch {
                        step,
                        kl_ema: c.kl_ema.unwrap_or(f64::NAN),
                        t_sep: c.t_sep.unwrap_or(f64::NAN),
                    };
                    self.emit(sink, r)?;
                    self.checkpoint(opts)?;
                }
                if self.cfg.eval_every.is_some_and(|e| step.is_multiple_of(e)) {
                    self.eval_and_emit(opts.valid, sink)?;
                }
                if opts.checkpoint_every.is_some_and(|e| step.is_multiple_of(e)) {
                    self.checkpoint(opts)?;
                }
                if capped(self) {
                    break 'epochs;
                }
                if opts.stop_after.is_some_and(|s| step >= s) {
                    self.checkpoint(opts)?;
                    return Ok(RunOutcome::Stopped);
                }
            }
            self.finish_epoch(opts, sink)?;
        }
        if self.state.last_eval_step != Some(self.state.step) {
            self.eval_and_emit(opts.valid, sink)?;
        }
        let r = LogRecord::End {
            step: self.state.step,
            epochs: self.state.epoch,
            switch_step: self.state.control.switch_step,
        };
        self.emit(sink, r)?;
        self.state.finished = true;
        self.checkpoint(opts)?;
        Ok(RunOutcome::Finished)
    }

    /// Model parameters, optimizer moments and state in one archive.
    pub fn to_archive(&self) -> Archive {
        let model = self.model.to_archive();
        let mut state = self.state.clone();
        state.rng_words = [self.rngs[0].get_word_pos().to_string(), self.rngs[1].get_word_pos().to_string()];
        let mut records = model.records;
        let mut optimizers = Vec::new();
        for (k, opt) in self.opts.iter().enumerate() {
            let mut steps = serde_json::Map::new();
            for (name, mo) in opt.iter_moments() {
                steps.insert(name.to_string(), json!(mo.t));
                for (tag, data) in [("m", &mo.m), ("v", &mo.v)] {
                    records.push(Record {
                        name: format!("opt{k}.{tag}/{name}"),
                        ownership: None,
                        tensor: Tensor::new(vec![data.len()], data.clone()).expect("flat moment"),
                    });
                }
            }
            optimizers.push(json!({ "steps": steps }));
        }
        Archive {
            manifest: json!({
                "kind": "trainer",
                "config": self.cfg,
                "state": state,
                "model": model.manifest,
                "optimizers": optimizers,
            }),
            records,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn from_archive(a: &Archive, path: &Path) -> Result<Self> {
        let m = &a.manifest;
        if m.get("kind").and_then(Value::as_str) != Some("trainer") {
            return Err(Error::format(path, "archive does not hold a trainer checkpoint"));
        }
        let field = |k: &str| m.get(k).cloned().ok_or_else(|| Error::format(path, format!("manifest lacks {k}")));
        let cfg: TrainerConfig =
            serde_json::from_value(field("config")?).map_err(|e| Error::format(path, format!("config: {e}")))?;
        let state: TrainState =
            serde_json::from_value(field("state")?).map_err(|e| Error::format(path, format!("state: {e}")))?;
        let model_archive = Archive {
            manifest: field("model")?,
            records: a.records.iter().filter(|r| r.ownership.is_some()).cloned().collect(),
        };
        let model = Trainee::from_archive(&model_archive, path)?;
        let mut t = Trainer::new(cfg, model)?;
        let opts = field("optimizers")?;
        for (k, opt) in t.opts.iter_mut().enumerate() {
            let steps = opts
                .get(k)
                .and_then(|o| o.get("steps"))
                .and_then(Value::as_object)
                .ok_or_else(|| Error::format(path, format!("optimizer {k} missing")))?;
            for (name, tv) in steps {
                let find = |tag: &str| {
                    let key = format!("opt{k}.{tag}/{name}");
                    a.records
                        .iter()
                        .find(|r| r.name == key)
                        .map(|r| r.tensor.data().to_vec())
                        .ok_or_else(|| Error::format(path, format!("missing record {key}")))
                };
                let mo = Moments {
                    m: find("m")?,
                    v: find("v")?,
                    t: tv.as_u64().ok_or_else(|| Error::format(path, "bad step count"))?,
                };
                opt.set_moments(name, mo);
            }
        }
        for (i, w) in state.rng_words.iter().enumerate() {
            let pos: u128 = w.parse().map_err(|_| Error::format(path, "bad rng position"))?;
            t.rngs[i].set_word_pos(pos);
        }
        t.state = state;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?, path)
    }
}
