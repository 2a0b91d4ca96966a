//! Composite loss, Adam, learning-rate annealing and the teacher-forced
//! training loop.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::{SceneRecord, Vocab};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::grounding::GroundingVars;
use crate::model::{item_rng, teacher_sequence, Model, Target};
use crate::nn::Mode;
use crate::params::{Grads, ParamStore};
use crate::seed::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// Parameters and optimizer moments are rounded to f32 after every
    /// update, matching the checkpoint format exactly.
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub word: f64,
    pub plural: f64,
    pub subcategory: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            word: 1.0,
            plural: 1.0,
            subcategory: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub anneal_every: usize,
    pub anneal_factor: f64,
    pub seed: u64,
    pub hidden: usize,
    pub embed: usize,
    pub beam: usize,
    pub clip_norm: f64,
    pub weights: LossWeights,
    pub workers: usize,
    pub precision: Precision,
    pub wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 16,
            lr0: 5e-4,
            anneal_every: 3,
            anneal_factor: 0.8,
            seed: 7,
            hidden: 32,
            embed: 32,
            beam: 3,
            clip_norm: 5.0,
            weights: LossWeights::default(),
            workers: 1,
            precision: Precision::F32,
            wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("anneal_every", self.anneal_every),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("beam", self.beam),
            ("workers", self.workers),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.anneal_factor > 0.0 && self.anneal_factor < 1.0) {
            return Err(Error::Config(format!("anneal_factor must be in (0, 1), got {}", self.anneal_factor)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        let w = &self.weights;
        if [w.word, w.plural, w.subcategory].iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `lr0 · factor^⌊epoch / every⌋`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let exponent = (epoch / cfg.anneal_every) as i32;
    cfg.lr0 * cfg.anneal_factor.powi(exponent)
}

/// `log P_full` at one entry, through the log-softmaxes.
fn log_p_full(g: &mut Graph<'_>, out: &GroundingVars, entry: usize, vocab: usize) -> Result<Var> {
    let k = g.value(out.log_r).len() - 1;
    if entry < vocab {
        let word = g.pick(out.log_txt, entry)?;
        let sentinel = g.pick(out.log_r, k)?;
        g.add(word, sentinel)
    } else {
        g.pick(out.log_r, entry - vocab)
    }
}

/// Mean over timesteps of `−log P_full[target]`, plus `−log P_p − log P_sc`
/// at region steps.
pub fn composite_loss(
    g: &mut Graph<'_>,
    outputs: &[GroundingVars],
    targets: &[Target],
    vocab: usize,
    weights: &LossWeights,
) -> Result<Var> {
    if outputs.len() != targets.len() {
        return Err(Error::Invalid(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::Invalid("loss over an empty sequence".into()));
    }
    let mut terms = Vec::with_capacity(outputs.len() * 3);
    for (out, target) in outputs.iter().zip(targets) {
        let lp = log_p_full(g, out, target.entry(vocab), vocab)?;
        terms.push(g.scale(lp, -weights.word));
        if let Target::Region { plural, subcategory, .. } = *target {
            let lp = g.pick(out.log_p, plural as usize)?;
            terms.push(g.scale(lp, -weights.plural));
            let ls = g.pick(out.log_sc, subcategory)?;
            terms.push(g.scale(ls, -weights.subcategory));
        }
    }
    let total = g.add_all(&terms)?;
    Ok(g.scale(total, 1.0 / outputs.len() as f64))
}

/// Loss of one record in the given mode.
pub fn record_loss(
    model: &Model,
    store: &ParamStore,
    record: &SceneRecord,
    vocab: &Vocab,
    weights: &LossWeights,
    mode: Mode,
    rng: &mut impl rand::Rng,
) -> Result<f64> {
    let mut g = Graph::new(store);
    let seq = teacher_sequence(record, vocab);
    let outs = model.forward_teacher(&mut g, &record.regions, &seq, mode, rng)?;
    let loss = composite_loss(&mut g, &outs, &seq.targets, vocab.len(), weights)?;
    g.value(loss).item()
}

/// Mean eval-mode loss over a corpus.
pub fn mean_loss(model: &Model, store: &ParamStore, corpus: &[SceneRecord], vocab: &Vocab, weights: &LossWeights) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Invalid("mean loss over an empty corpus".into()));
    }
    let mut rng = rng_for(0, "unused");
    let mut total = 0.0;
    for r in corpus {
        total += record_loss(model, store, r, vocab, weights, Mode::Eval, &mut rng)?;
    }
    Ok(total / corpus.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub lr: f64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            lr,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }
}

/// Bias-corrected Adam update at the optimizer's current `lr`.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, opt: &mut Adam) -> Result<()> {
    if grads.len() != store.len() || opt.m.len() != store.len() {
        return Err(Error::Invalid(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            opt.m.len(),
            store.len()
        )));
    }
    for ((name, _), grad) in store.iter().zip(grads.iter()) {
        if !grad.all_finite() {
            return Err(Error::NanGradient(name.to_string()));
        }
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (i, ((_, param), grad)) in store.iter_mut().zip(grads.iter()).enumerate() {
        if param.shape() != grad.shape() {
            return Err(crate::error::shape_err("adam_step", param.shape(), grad.shape()));
        }
        let m = opt.m[i].data_mut();
        let v = opt.v[i].data_mut();
        for (((p, &gr), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * gr;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * gr * gr;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub wall_secs: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch\tlr\tmean_loss\twall_secs";

    pub fn render(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for e in &self.entries {
            let wall = e.wall_secs.map_or("-".to_string(), |w| format!("{w:.3}"));
            writeln!(s, "{}\t{:e}\t{:.6}\t{}", e.epoch, e.lr, e.mean_loss, wall).expect("write to string");
        }
        s
    }
}

/// Loss and gradient of one record in train mode.
fn item_gradient(
    model: &Model,
    store: &ParamStore,
    record: &SceneRecord,
    vocab: &Vocab,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(f64, Grads)> {
    let mut rng = item_rng(cfg.seed, epoch, index);
    let mut g = Graph::new(store);
    let seq = teacher_sequence(record, vocab);
    let outs = model.forward_teacher(&mut g, &record.regions, &seq, Mode::Train, &mut rng)?;
    let loss = composite_loss(&mut g, &outs, &seq.targets, vocab.len(), &cfg.weights)?;
    let value = g.value(loss).item()?;
    Ok((value, g.backward(loss)?))
}

/// Trains in place. The optimizer is created on the first call and can be
/// resumed from a checkpoint.
pub fn train(
    model: &Model,
    store: &mut ParamStore,
    opt: &mut Adam,
    corpus: &[SceneRecord],
    vocab: &Vocab,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    if cfg.precision == Precision::F32 {
        store.round_to_f32();
        opt.round_to_f32();
    }
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_schedule(epoch, cfg);
        opt.lr = lr;
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("shuffle/{epoch}")));

        let mut loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frozen: &ParamStore = store;
            let work = |&i: &usize| item_gradient(model, frozen, &corpus[i], vocab, cfg, epoch, i);
            let results: Vec<Result<(f64, Grads)>> = if cfg.workers == 1 {
                batch.iter().map(work).collect()
            } else {
                pool.install(|| batch.par_iter().map(work).collect())
            };
            let mut total = Grads::zeros_like(store);
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                total.accumulate(&grads)?;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            loss_sum += batch_loss;
            total.scale(1.0 / batch.len() as f64);
            total.clip_global_norm(cfg.clip_norm);
            adam_step(store, &total, opt)?;
            if cfg.precision == Precision::F32 {
                store.round_to_f32();
                opt.round_to_f32();
            }
        }
        log.entries.push(EpochLog {
            epoch,
            lr,
            mean_loss: loss_sum / corpus.len() as f64,
            wall_secs: cfg.wall_time.then(|| started.elapsed().as_secs_f64()),
        });
    }
    Ok(log)
}
