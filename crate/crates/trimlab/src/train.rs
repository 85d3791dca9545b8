//! Training and evaluation.
//!
//! The protocol is fixed across all experiments: minibatch Adam with
//! decoupled weight decay, a learning rate that halves whenever the
//! validation error stops improving, and two bookkeeping duties that the
//! pruning engine depends on — an optional snapshot of all weights at a
//! given epoch (the rewind point) and retention of the best-validation
//! model as the result of training.

use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::tasks::{Dataset, LossKind, Metric, Split, Target};
use crate::tensor::{Mode, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub weight_decay: f32,
    /// Epochs without a new best validation error before the rate halves.
    pub plateau_patience: usize,
    /// Seeds minibatch shuffling and dropout for this run.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 60,
            batch_size: 64,
            learning_rate: 1e-3,
            weight_decay: 2e-4,
            plateau_patience: 10,
            seed: 0,
        }
    }
}

/// All weights of a model as they stood after `epoch` training epochs;
/// the pruning engine rewinds surviving units back to these values.
#[derive(Debug, Clone, PartialEq)]
pub struct RewindSnapshot {
    pub model: ModelGraph,
    pub epoch: u32,
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_err: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr: Vec<f32>,
    /// Epoch with the lowest validation error (first on ties).
    pub best_epoch: usize,
    pub best_val_err: f64,
    pub snapshot: Option<RewindSnapshot>,
}

/// Adam optimizer with decoupled weight decay.
///
/// Each step first shrinks the parameter by `lr·wd·p` and then applies the
/// bias-corrected Adam update `lr·m̂/(√v̂ + ε)` with β₁ = 0.9, β₂ = 0.999,
/// ε = 1e-8. Decay applies to every trainable parameter uniformly.
pub struct Adam {
    pub lr: f32,
    pub weight_decay: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    /// Running β₁ᵗ and β₂ᵗ for bias correction.
    beta1_t: f32,
    beta2_t: f32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    /// One moment-buffer pair per parameter tensor, sized up front.
    pub fn new(lr: f32, weight_decay: f32, sizes: &[usize]) -> Adam {
        Adam {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            beta1_t: 1.0,
            beta2_t: 1.0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    /// Advances the step counter; call once per minibatch, before `update`.
    pub fn begin_step(&mut self) {
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
    }

    /// Updates one parameter tensor in place from its gradient.
    pub fn update(&mut self, slot: usize, param: &mut [f32], grad: &[f32]) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), self.m[slot].len());
        let c1 = 1.0 / (1.0 - self.beta1_t);
        let c2 = 1.0 / (1.0 - self.beta2_t);
        let decay = self.lr * self.weight_decay;
        let m = &mut self.m[slot];
        let v = &mut self.v[slot];
        for i in 0..param.len() {
            param[i] -= decay * param[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = m[i] * c1;
            let vhat = v[i] * c2;
            param[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Halves the learning rate when the validation error has not strictly
/// improved on the running best for `patience` consecutive epochs. The
/// streak resets on improvement and after each halving.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    pub best: f64,
    streak: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> PlateauScheduler {
        PlateauScheduler {
            patience,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    /// Feeds one epoch's validation error; returns true when the learning
    /// rate should halve now.
    pub fn observe(&mut self, val_err: f64) -> bool {
        if val_err < self.best {
            self.best = val_err;
            self.streak = 0;
            return false;
        }
        self.streak += 1;
        if self.streak >= self.patience {
            self.streak = 0;
            return true;
        }
        false
    }
}

/// Minibatch index ranges over `n` samples. A trailing batch of a single
/// sample is folded into the previous batch, because batch statistics are
/// degenerate on one sample.
pub(crate) fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n / batch_size + 1);
    let mut start = 0;
    while start < n {
        let end = (start + batch_size).min(n);
        out.push((start, end));
        start = end;
    }
    if out.len() > 1 {
        let (s, e) = *out.last().unwrap();
        if e - s == 1 {
            out.pop();
            out.last_mut().unwrap().1 = e;
        }
    }
    out
}

/// Copies the indexed samples of a split into one input tensor.
pub(crate) fn gather_batch(split: &Split, idx: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idx.len() * split.sample_len);
    for &i in idx {
        data.extend_from_slice(split.sample(i));
    }
    let mut shape = vec![idx.len()];
    shape.extend_from_slice(input_shape);
    Tensor::new(&shape, data)
}

fn class_targets(split: &Split, idx: &[usize]) -> Result<Vec<u32>> {
    idx.iter()
        .map(|&i| match split.targets[i] {
            Target::Class(c) => Ok(c),
            Target::Binary(_) => Err(Error::contract(
                "cross-entropy training needs class targets",
            )),
        })
        .collect()
}

fn binary_targets(split: &Split, idx: &[usize]) -> Result<Vec<f32>> {
    idx.iter()
        .map(|&i| match split.targets[i] {
            Target::Binary(t) => Ok(t),
            Target::Class(_) => Err(Error::contract(
                "binary cross-entropy training needs binary targets",
            )),
        })
        .collect()
}

/// Trains `model` on `data.train` and leaves it holding the weights of the
/// epoch with the lowest validation error.
///
/// `record_at` asks for a [`RewindSnapshot`] of the weights after exactly
/// that many epochs (0 = the initial weights, before any update); the
/// snapshot lands in the returned history. Minibatch order and dropout are
/// driven by `cfg.seed`, so identical inputs give bitwise-identical runs.
pub fn train(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    record_at: Option<usize>,
) -> Result<TrainHistory> {
    train_observed(model, data, cfg, record_at, &mut |_, _| {})
}

/// [`train`] with a per-epoch observer (called after each epoch's updates,
/// before evaluation) — useful for tests that follow weight trajectories.
pub fn train_observed(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &TrainConfig,
    record_at: Option<usize>,
    observer: &mut dyn FnMut(usize, &ModelGraph),
) -> Result<TrainHistory> {
    if cfg.epochs == 0 {
        return Err(Error::range("training needs at least one epoch"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::range(
            "batch size must be at least 2 (batch statistics)",
        ));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(Error::range("learning rate must be positive"));
    }
    if let Some(k) = record_at {
        if k > cfg.epochs {
            return Err(Error::contract(format!(
                "cannot snapshot epoch {k} of a {}-epoch run",
                cfg.epochs
            )));
        }
    }
    data.check()?;
    if data.train.n < 2 {
        return Err(Error::contract("training split needs at least 2 samples"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    // Stable parameter enumeration: layer order, weight before bias,
    // gamma before beta. Must match the forward pass's leaf order.
    let sizes: Vec<usize> = model
        .layers
        .iter()
        .flat_map(|l| {
            [&l.weight, &l.bias, &l.gamma, &l.beta]
                .into_iter()
                .flatten()
                .map(Tensor::len)
                .collect::<Vec<_>>()
        })
        .collect();
    let mut adam = Adam::new(cfg.learning_rate, cfg.weight_decay, &sizes);
    let mut sched = PlateauScheduler::new(cfg.plateau_patience);
    let mut hist = TrainHistory::default();
    if record_at == Some(0) {
        hist.snapshot = Some(RewindSnapshot {
            model: model.clone(),
            epoch: 0,
        });
    }
    let mut best: Option<ModelGraph> = None;
    let mut best_err = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut order: Vec<usize> = (0..data.train.n).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for (bi, &(start, end)) in batch_ranges(data.train.n, cfg.batch_size).iter().enumerate() {
            let idx = &order[start..end];
            let input = gather_batch(&data.train, idx, &model.input_shape)?;
            let mut tape = Tape::new();
            let pass = model.forward_on_tape(&mut tape, &input, Mode::Train, &mut rng, None)?;
            let loss_v = match data.loss {
                LossKind::CrossEntropy => {
                    let targets = class_targets(&data.train, idx)?;
                    tape.cross_entropy(pass.logits, &targets)?
                }
                LossKind::Binary => {
                    let targets = binary_targets(&data.train, idx)?;
                    let probs = tape.sigmoid(pass.logits);
                    tape.binary_cross_entropy(probs, &targets)?
                }
            };
            let loss = tape.scalar(loss_v)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            epoch_loss += f64::from(loss) * idx.len() as f64;
            let mut grads = tape.backward(loss_v)?;
            adam.begin_step();
            for (slot, (li, s, v)) in pass.params.iter().enumerate() {
                let g = grads.take(*v).ok_or_else(|| {
                    Error::contract(format!("layer {li} {s:?} received no gradient"))
                })?;
                adam.update(slot, model.param_mut(*li, *s), &g);
            }
            model.apply_mask();
        }
        observer(epoch, model);
        let val_err = evaluate(model, &data.val, data)?;
        hist.train_loss.push(epoch_loss / data.train.n as f64);
        hist.val_err.push(val_err);
        hist.lr.push(adam.lr);
        if val_err < best_err {
            best_err = val_err;
            best_epoch = epoch;
            best = Some(model.clone());
        }
        if sched.observe(val_err) {
            adam.lr *= 0.5;
        }
        if record_at == Some(epoch + 1) {
            hist.snapshot = Some(RewindSnapshot {
                model: model.clone(),
                epoch: (epoch + 1) as u32,
            });
        }
    }
    if let Some(b) = best {
        *model = b;
    }
    hist.best_epoch = best_epoch;
    hist.best_val_err = best_err;
    Ok(hist)
}

/// Task error of `model` on a split: misclassification rate for
/// classification tasks, `1 − F` (±1 frame) for onset detection.
pub fn evaluate(model: &mut ModelGraph, split: &Split, data: &Dataset) -> Result<f64> {
    if split.n == 0 {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0); // eval mode draws nothing
    let idx_all: Vec<usize> = (0..split.n).collect();
    match data.metric {
        Metric::ClassError => {
            let mut wrong = 0usize;
            for &(start, end) in &batch_ranges(split.n, 256) {
                let idx = &idx_all[start..end];
                let input = gather_batch(split, idx, &model.input_shape)?;
                let mut tape = Tape::new();
                let pass = model.forward_on_tape(&mut tape, &input, Mode::Eval, &mut rng, None)?;
                let k = tape.shape(pass.logits)[1];
                let logits = tape.data(pass.logits);
                for (row, &i) in idx.iter().enumerate() {
                    let r = &logits[row * k..(row + 1) * k];
                    let mut arg = 0usize;
                    for (j, &v) in r.iter().enumerate() {
                        if v > r[arg] {
                            arg = j;
                        }
                    }
                    let Target::Class(t) = split.targets[i] else {
                        return Err(Error::contract("classification metric on binary targets"));
                    };
                    if arg as u32 != t {
                        wrong += 1;
                    }
                }
            }
            Ok(wrong as f64 / split.n as f64)
        }
        Metric::OnsetError => {
            let mut probs = vec![0.0f32; split.n];
            let mut targets = vec![0.0f32; split.n];
            for &(start, end) in &batch_ranges(split.n, 256) {
                let idx = &idx_all[start..end];
                let input = gather_batch(split, idx, &model.input_shape)?;
                let mut tape = Tape::new();
                let pass = model.forward_on_tape(&mut tape, &input, Mode::Eval, &mut rng, None)?;
                let logits = tape.data(pass.logits);
                if logits.len() != idx.len() {
                    return Err(Error::contract(format!(
                        "onset metric needs one logit per sample, got {} for {}",
                        logits.len(),
                        idx.len()
                    )));
                }
                for (row, &i) in idx.iter().enumerate() {
                    probs[i] = 1.0 / (1.0 + (-logits[row]).exp());
                    let Target::Binary(t) = split.targets[i] else {
                        return Err(Error::contract("onset metric on class targets"));
                    };
                    targets[i] = t;
                }
            }
            crate::tasks::onset_error(&probs, &targets, &split.spans)
        }
    }
}
