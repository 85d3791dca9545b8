//! The iterative prune-and-rewind engine.
//!
//! One *run* starts from a freshly initialized model, trains it to
//! completion while snapshotting the weights partway through, and then
//! alternates pruning with retraining for a fixed number of passes. Three
//! strategies share the loop:
//!
//! * **trim** — remove the lowest-ranked units structurally, so tensors
//!   physically shrink, and rewind the survivors to their snapshot values;
//! * **mask** — zero the smallest-magnitude weights in place and rewind the
//!   survivors, keeping every tensor full-size;
//! * **finetune** — the same masking, but training continues from the
//!   trained weights instead of rewinding.
//!
//! Each pass appends an [`IterationRecord`] with the model's accounting
//! (parameters, flops, memory, checkpoint size) and its errors on all three
//! splits, giving a 16-row curve per run under the default 15 iterations.

pub mod criteria;
pub mod mask;
pub mod rank;
pub mod rewind;
pub mod trim;

pub use criteria::{score_units, Criterion, CriterionScores};
pub use mask::{floor_schedule, update_mask};
pub use rank::{rank_units, Scope, TrimPlan};
pub use rewind::rewind;
pub use trim::trim;

use std::fmt;
use std::time::Instant;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::graph::{ModelGraph, ModelMask};
use crate::tasks::Dataset;
use crate::train::{evaluate, train, RewindSnapshot, TrainConfig};

/// Batch size used when a criterion needs forward passes over the holdout.
const SCORE_BATCH: usize = 256;

/// Spreads per-pass seeds across the 64-bit space (Weyl increment).
const PASS_SEED_STRIDE: u64 = 0x9E37_79B9_7F4A_7C15;

/// How a run removes capacity on each pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Structured removal of whole units, with rewinding.
    Trim,
    /// Unstructured magnitude masking, with rewinding.
    Mask,
    /// Unstructured magnitude masking, continuing from trained weights.
    Finetune,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Trim => "trim",
            Strategy::Mask => "mask",
            Strategy::Finetune => "finetune",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "trim" => Ok(Strategy::Trim),
            "mask" => Ok(Strategy::Mask),
            "finetune" => Ok(Strategy::Finetune),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}; expected trim, mask, or finetune"
            ))),
        }
    }

    pub fn all() -> [Strategy; 3] {
        [Strategy::Trim, Strategy::Mask, Strategy::Finetune]
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings for a pruning run, shared by every strategy.
#[derive(Debug, Clone, PartialEq)]
pub struct LotteryConfig {
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub scope: Scope,
    /// Fraction of what remains that each pass removes.
    pub prune_rate: f64,
    /// Number of prune passes after the initial full training.
    pub iterations: usize,
    /// Position of the rewind snapshot as a fraction of the first pass's
    /// epochs; later passes train for the remaining epochs.
    pub rewind_fraction: f64,
}

impl Default for LotteryConfig {
    fn default() -> LotteryConfig {
        LotteryConfig {
            strategy: Strategy::Trim,
            criterion: Criterion::Magnitude,
            scope: Scope::Local,
            prune_rate: 0.3,
            iterations: 15,
            rewind_fraction: 0.5,
        }
    }
}

impl LotteryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(Error::range(format!(
                "prune rate must lie strictly between 0 and 1, got {}",
                self.prune_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::range("a run needs at least one prune pass"));
        }
        if !(self.rewind_fraction >= 0.0 && self.rewind_fraction < 1.0) {
            return Err(Error::range(format!(
                "rewind fraction must lie in [0, 1), got {}",
                self.rewind_fraction
            )));
        }
        if self.strategy != Strategy::Trim && self.criterion != Criterion::Magnitude {
            return Err(Error::config(format!(
                "the {} strategy scores individual weights, so it only pairs \
                 with the magnitude criterion (got {})",
                self.strategy, self.criterion
            )));
        }
        Ok(())
    }
}

/// One row of a run's curve: the model's cost and errors after a pass.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    /// 0 = the untouched dense model; pass `i` has removed capacity i times.
    pub iteration: usize,
    /// Effective (nonzero) parameters over the dense model's count.
    pub remaining_fraction: f64,
    /// Effective parameter count — masked-out weights don't count.
    pub params: u64,
    /// Inference flops for one sample; masking leaves this unchanged.
    pub flops: u64,
    /// Inference bytes at batch size 1.
    pub memory_bytes: u64,
    /// Serialized checkpoint size.
    pub disk_bytes: u64,
    pub train_err: f64,
    pub val_err: f64,
    pub test_err: f64,
    /// Wall-clock seconds for the pass, or 0.0 unless timing was requested.
    pub seconds: f64,
}

/// Observer hooks for following a run from tests.
#[derive(Debug)]
pub enum LotteryEvent<'a> {
    /// A training pass just finished; the model holds its best-validation
    /// weights.
    Trained { iteration: usize, model: &'a ModelGraph },
    /// Capacity was just removed (and, outside finetune, rewound); the
    /// model is about to retrain.
    Pruned { iteration: usize, model: &'a ModelGraph },
    /// A pass's record was just finalized (useful for incremental
    /// persistence: everything up to this record survives a crash).
    Measured { record: &'a IterationRecord },
    /// Surviving parameters were just reset to the early-training snapshot
    /// (trim and mask do this every pass; finetune never does).
    Rewound { iteration: usize },
}

/// Runs the full prune-and-rewind protocol on `model`.
///
/// `model` must be freshly initialized and untrained; `base` supplies the
/// optimizer settings, the per-run seed, and the first pass's epoch count.
/// Returns one record per completed pass (up to `cfg.iterations + 1`),
/// stopping early once a pass can no longer remove anything.
pub fn lottery_run(
    model: ModelGraph,
    data: &Dataset,
    cfg: &LotteryConfig,
    base: &TrainConfig,
    timing: bool,
) -> Result<Vec<IterationRecord>> {
    lottery_run_observed(model, data, cfg, base, timing, &mut |_| {})
}

/// [`lottery_run`] with an observer called after every train and prune step.
pub fn lottery_run_observed(
    mut model: ModelGraph,
    data: &Dataset,
    cfg: &LotteryConfig,
    base: &TrainConfig,
    timing: bool,
    observer: &mut dyn FnMut(LotteryEvent),
) -> Result<Vec<IterationRecord>> {
    cfg.validate()?;
    model.validate()?;
    let dense_params = model.count_params();
    if dense_params == 0 {
        return Err(Error::contract("model has no parameters to prune"));
    }
    if model.mask.is_some() {
        return Err(Error::contract("model already carries a mask"));
    }

    let total_epochs = base.epochs;
    let rewind_epoch = (cfg.rewind_fraction * total_epochs as f64).floor() as usize;
    let later_epochs = (total_epochs - rewind_epoch).max(1);

    let mut records = Vec::with_capacity(cfg.iterations + 1);

    // Pass 0: train the dense model, snapshotting at the rewind point.
    let started = Instant::now();
    let mut pass_cfg = base.clone();
    let history = train(&mut model, data, &pass_cfg, Some(rewind_epoch))?;
    let snapshot = history
        .snapshot
        .ok_or_else(|| Error::contract("training returned no rewind snapshot"))?;
    observer(LotteryEvent::Trained { iteration: 0, model: &model });
    records.push(measure(0, &mut model, data, dense_params, seconds(started, timing))?);
    observer(LotteryEvent::Measured { record: records.last().unwrap() });

    for iteration in 1..=cfg.iterations {
        let started = Instant::now();
        let (removed, rewound) = prune_once(&mut model, data, cfg, &snapshot)?;
        if removed == 0 {
            break;
        }
        observer(LotteryEvent::Pruned { iteration, model: &model });
        if rewound {
            observer(LotteryEvent::Rewound { iteration });
        }

        pass_cfg.epochs = later_epochs;
        pass_cfg.seed = base
            .seed
            .wrapping_add((iteration as u64).wrapping_mul(PASS_SEED_STRIDE));
        train(&mut model, data, &pass_cfg, None)?;
        observer(LotteryEvent::Trained { iteration, model: &model });
        records.push(measure(
            iteration,
            &mut model,
            data,
            dense_params,
            seconds(started, timing),
        )?);
        observer(LotteryEvent::Measured { record: records.last().unwrap() });
    }
    Ok(records)
}

/// Applies one pruning step in place; returns how many scalars or units it
/// removed (0 = nothing left to take, the run should stop).
fn prune_once(
    model: &mut ModelGraph,
    data: &Dataset,
    cfg: &LotteryConfig,
    snapshot: &RewindSnapshot,
) -> Result<(usize, bool)> {
    match cfg.strategy {
        Strategy::Trim => {
            let scores = score_units(model, cfg.criterion, &data.val, SCORE_BATCH)?;
            let plan = rank_units(&scores, cfg.prune_rate, cfg.scope)?;
            let dropped = plan.dropped_units(&scores);
            if dropped == 0 {
                return Ok((0, false));
            }
            *model = trim(model, &plan)?;
            rewind(model, snapshot)?;
            Ok((dropped, true))
        }
        Strategy::Mask | Strategy::Finetune => {
            let current = model.mask.clone().unwrap_or_else(|| ModelMask::ones(model));
            let next = update_mask(model, &current, cfg.prune_rate, cfg.scope)?;
            let newly_zeroed = next.zero_count() - current.zero_count();
            if newly_zeroed == 0 {
                return Ok((0, false));
            }
            model.mask = Some(next);
            model.apply_mask();
            let rewound = cfg.strategy == Strategy::Mask;
            if rewound {
                rewind(model, snapshot)?;
            }
            Ok((newly_zeroed, rewound))
        }
    }
}

fn seconds(started: Instant, timing: bool) -> f64 {
    if timing {
        started.elapsed().as_secs_f64()
    } else {
        0.0
    }
}

/// Evaluates the model on all three splits and snapshots its cost figures.
fn measure(
    iteration: usize,
    model: &mut ModelGraph,
    data: &Dataset,
    dense_params: u64,
    seconds: f64,
) -> Result<IterationRecord> {
    let params = model.effective_params();
    Ok(IterationRecord {
        iteration,
        remaining_fraction: params as f64 / dense_params as f64,
        params,
        flops: model.count_flops()?,
        memory_bytes: model.estimate_memory(1)?,
        disk_bytes: checkpoint::disk_size(model)?,
        train_err: evaluate(model, &data.train, data)?,
        val_err: evaluate(model, &data.val, data)?,
        test_err: evaluate(model, &data.test, data)?,
        seconds,
    })
}
