//! Experiment orchestration: configuration, the strategy × criterion sweep,
//! model selection, and report files.
//!
//! A sweep expands a config into one run per (task, strategy, criterion,
//! scope, repetition), executes each run with its own derived seed, and
//! persists records incrementally so an interrupted sweep can resume without
//! redoing finished runs. Reports are regenerated from the records alone, so
//! `report` works on any directory a sweep ever touched.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.toml            exact configuration the records were produced with
//! records/<run>.csv      one row per completed pass, appended as they finish
//! records/<run>.done     sentinel: the shard above is complete
//! quarantine/<run>.err   error text for runs that failed (sweep continues)
//! curves.csv             merged, sorted record table
//! table.csv              reference vs. selected models per run group
//! summary.txt            human-readable selection summary
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::build_model;
use crate::lottery::{
    lottery_run_observed, Criterion, IterationRecord, LotteryConfig, LotteryEvent, Scope, Strategy,
};
use crate::tasks::{self, fnv1a64, task_spec, TaskKind};
use crate::train::TrainConfig;

/// Pinned column order for curves.csv; every record row follows it exactly.
pub const CURVES_HEADER: &str = "task,strategy,criterion,scope,seed,iteration,remaining_fraction,params,flops,memory_bytes,disk_bytes,train_err,val_err,test_err,seconds";

const TABLE_HEADER: &str = "task,strategy,criterion,scope,model,iteration,test_err,params,disk_bytes,flops,memory_bytes,remaining_fraction";

/// Error ceiling (relative to the reference model) for the "smallest" pick.
pub const SMALLEST_ERR_RATIO: f64 = 1.5;
/// Error ceiling (relative to the reference model) for the "optimal" pick.
pub const OPTIMAL_ERR_RATIO: f64 = 1.1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Optional overrides for the per-task training protocol. Anything left
/// unset falls back to the task's defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plateau_patience: Option<usize>,
}

/// A full experiment description. The default value is the reference
/// protocol: all tasks, all strategies and criteria, 30% pruned per pass,
/// 15 passes, 5 repetitions, rewind halfway into training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub tasks: Vec<String>,
    pub strategies: Vec<String>,
    pub criteria: Vec<String>,
    pub scope: String,
    pub prune_rate: f64,
    pub iterations: usize,
    pub repetitions: usize,
    pub rewind_fraction: f64,
    pub base_seed: u64,
    /// Samples per task dataset; unset uses each task's default size.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<usize>,
    /// Record wall-clock seconds per pass (off by default: timing makes the
    /// records machine-dependent and breaks byte-for-byte reproducibility).
    pub timing: bool,
    pub out_dir: PathBuf,
    pub train: TrainOverrides,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tasks: TaskKind::all().iter().map(|t| t.name().to_string()).collect(),
            strategies: Strategy::all().iter().map(|s| s.name().to_string()).collect(),
            criteria: Criterion::all().iter().map(|c| c.name().to_string()).collect(),
            scope: Scope::Local.name().to_string(),
            prune_rate: 0.3,
            iterations: 15,
            repetitions: 5,
            rewind_fraction: 0.5,
            base_seed: 17,
            dataset_size: None,
            timing: false,
            out_dir: PathBuf::from("runs"),
            train: TrainOverrides::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::config("no tasks selected"));
        }
        for t in &self.tasks {
            TaskKind::parse(t)?;
        }
        if self.strategies.is_empty() {
            return Err(Error::config("no strategies selected"));
        }
        for s in &self.strategies {
            Strategy::parse(s)?;
        }
        if self.criteria.is_empty() {
            return Err(Error::config("no criteria selected"));
        }
        for c in &self.criteria {
            Criterion::parse(c)?;
        }
        Scope::parse(&self.scope)?;
        if !(self.prune_rate > 0.0 && self.prune_rate < 1.0) {
            return Err(Error::range(format!(
                "prune_rate {} is outside (0, 1)",
                self.prune_rate
            )));
        }
        if self.iterations == 0 {
            return Err(Error::range("iterations must be at least 1"));
        }
        if self.repetitions == 0 {
            return Err(Error::range("repetitions must be at least 1"));
        }
        if !(self.rewind_fraction >= 0.0 && self.rewind_fraction < 1.0) {
            return Err(Error::range(format!(
                "rewind_fraction {} is outside [0, 1)",
                self.rewind_fraction
            )));
        }
        if self.enumerate_runs()?.is_empty() {
            return Err(Error::config(
                "the strategy/criterion selection produces no runs (masking and \
                 finetuning only support the magnitude criterion)",
            ));
        }
        Ok(())
    }

    /// Expands the config into the concrete run grid, each with its derived
    /// seed. Masking and finetuning rank individual weights, so they only
    /// pair with the magnitude criterion; other combinations are skipped.
    pub fn enumerate_runs(&self) -> Result<Vec<RunSpec>> {
        let mut runs = Vec::new();
        let scope = Scope::parse(&self.scope)?;
        for t in &self.tasks {
            let task = TaskKind::parse(t)?;
            for s in &self.strategies {
                let strategy = Strategy::parse(s)?;
                for c in &self.criteria {
                    let criterion = Criterion::parse(c)?;
                    if strategy != Strategy::Trim && criterion != Criterion::Magnitude {
                        continue;
                    }
                    for rep in 0..self.repetitions {
                        runs.push(RunSpec::new(self.base_seed, task, strategy, criterion, scope, rep));
                    }
                }
            }
        }
        runs.sort_by(|a, b| a.id().cmp(&b.id()));
        runs.dedup();
        Ok(runs)
    }

    /// Applies CLI-style selection overrides, narrowing the grid.
    pub fn with_overrides(
        mut self,
        task: Option<&str>,
        strategy: Option<&str>,
        criterion: Option<&str>,
        scope: Option<&str>,
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<ExperimentConfig> {
        if let Some(t) = task {
            self.tasks = vec![t.to_string()];
        }
        if let Some(s) = strategy {
            self.strategies = vec![s.to_string()];
        }
        if let Some(c) = criterion {
            self.criteria = vec![c.to_string()];
        }
        if let Some(s) = scope {
            self.scope = s.to_string();
        }
        if let Some(s) = seed {
            self.base_seed = s;
        }
        if let Some(o) = out {
            self.out_dir = o.to_path_buf();
        }
        self.validate()?;
        Ok(self)
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn emit_config(cfg: &ExperimentConfig) -> String {
    let mut text = toml::to_string_pretty(cfg).expect("a validated config always serializes");
    if cfg.dataset_size.is_none() {
        // When the config leaves dataset sizes to the per-task defaults,
        // record what those defaults resolved to. The echo comparison is
        // byte-exact, so records produced under different built-in defaults
        // refuse to mix even though the configs read the same.
        let resolved: Vec<String> = cfg
            .tasks
            .iter()
            .filter_map(|t| tasks::TaskKind::parse(t).ok())
            .map(|k| format!("{}={}", k.name(), tasks::task_spec(k).default_size))
            .collect();
        if !resolved.is_empty() {
            text.push_str(&format!("# resolved dataset sizes: {}\n", resolved.join(" ")));
        }
    }
    text
}

// ---------------------------------------------------------------------------
// Runs and records
// ---------------------------------------------------------------------------

/// One cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub task: TaskKind,
    pub strategy: Strategy,
    pub criterion: Criterion,
    pub scope: Scope,
    pub rep: usize,
    /// Seed for everything this run does (initialization and training);
    /// derived from the base seed and the run's identity, so reordering or
    /// omitting runs never changes any other run's stream.
    pub seed: u64,
}

impl RunSpec {
    fn new(
        base_seed: u64,
        task: TaskKind,
        strategy: Strategy,
        criterion: Criterion,
        scope: Scope,
        rep: usize,
    ) -> RunSpec {
        let key = format!(
            "{}/{}/{}/{}/{rep}",
            task.name(),
            strategy.name(),
            criterion.name(),
            scope.name()
        );
        RunSpec {
            task,
            strategy,
            criterion,
            scope,
            rep,
            seed: base_seed.wrapping_add(fnv1a64(key.as_bytes())),
        }
    }

    /// Stable file-system identity for shards and quarantine entries.
    pub fn id(&self) -> String {
        format!(
            "{}_{}_{}_{}_r{:02}",
            self.task.name(),
            self.strategy.name(),
            self.criterion.name(),
            self.scope.name(),
            self.rep
        )
    }
}

/// Seed for a task's dataset: shared by every run of that task so all
/// strategies compete on identical data.
pub fn dataset_seed(base_seed: u64, task: TaskKind) -> u64 {
    base_seed.wrapping_add(fnv1a64(format!("dataset/{}", task.name()).as_bytes()))
}

/// One curves.csv row: a pass's measurements plus the run's identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub task: String,
    pub strategy: String,
    pub criterion: String,
    pub scope: String,
    pub seed: u64,
    pub rec: IterationRecord,
}

impl RunRecord {
    fn sort_key(&self) -> (String, String, String, String, u64, usize) {
        (
            self.task.clone(),
            self.strategy.clone(),
            self.criterion.clone(),
            self.scope.clone(),
            self.seed,
            self.rec.iteration,
        )
    }

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.6},{},{},{},{},{:.6},{:.6},{:.6},{:.3}\n",
            self.task,
            self.strategy,
            self.criterion,
            self.scope,
            self.seed,
            self.rec.iteration,
            self.rec.remaining_fraction,
            self.rec.params,
            self.rec.flops,
            self.rec.memory_bytes,
            self.rec.disk_bytes,
            self.rec.train_err,
            self.rec.val_err,
            self.rec.test_err,
            self.rec.seconds,
        )
    }
}

/// Parses record rows (with or without the header line) back from CSV.
pub fn parse_records(text: &str) -> Result<Vec<RunRecord>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() || line == CURVES_HEADER || line.starts_with('#') {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 15 {
            return Err(Error::config(format!(
                "record line {}: expected 15 fields, got {}",
                ln + 1,
                f.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::config(format!("record line {}: bad number `{}`", ln + 1, f[i])))
        };
        let int = |i: usize| -> Result<u64> {
            f[i].parse::<u64>()
                .map_err(|_| Error::config(format!("record line {}: bad integer `{}`", ln + 1, f[i])))
        };
        out.push(RunRecord {
            task: f[0].to_string(),
            strategy: f[1].to_string(),
            criterion: f[2].to_string(),
            scope: f[3].to_string(),
            seed: int(4)?,
            rec: IterationRecord {
                iteration: int(5)? as usize,
                remaining_fraction: num(6)?,
                params: int(7)?,
                flops: int(8)?,
                memory_bytes: int(9)?,
                disk_bytes: int(10)?,
                train_err: num(11)?,
                val_err: num(12)?,
                test_err: num(13)?,
                seconds: num(14)?,
            },
        });
    }
    Ok(out)
}

/// Checks the record-table invariants: every remaining fraction is in
/// (0, 1], and fractions strictly decrease along each run.
pub fn check_run_invariants(records: &[RunRecord]) -> Result<()> {
    let mut by_run: BTreeMap<(String, String, String, String, u64), Vec<&RunRecord>> =
        BTreeMap::new();
    for r in records {
        if !(r.rec.remaining_fraction > 0.0 && r.rec.remaining_fraction <= 1.0) {
            return Err(Error::contract(format!(
                "remaining fraction {} outside (0, 1] at {} iteration {}",
                r.rec.remaining_fraction, r.task, r.rec.iteration
            )));
        }
        by_run
            .entry((
                r.task.clone(),
                r.strategy.clone(),
                r.criterion.clone(),
                r.scope.clone(),
                r.seed,
            ))
            .or_default()
            .push(r);
    }
    for (key, mut rows) in by_run {
        rows.sort_by_key(|r| r.rec.iteration);
        for pair in rows.windows(2) {
            if pair[1].rec.remaining_fraction >= pair[0].rec.remaining_fraction {
                return Err(Error::contract(format!(
                    "remaining fraction fails to decrease between iterations {} and {} of {:?}",
                    pair[0].rec.iteration, pair[1].rec.iteration, key
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep execution
// ---------------------------------------------------------------------------

/// What a sweep did: freshly executed runs, runs reused from complete
/// shards, runs that failed (with their error text), and the merged records.
#[derive(Debug)]
pub struct SweepOutcome {
    pub completed: Vec<RunSpec>,
    pub skipped: Vec<RunSpec>,
    pub failed: Vec<(RunSpec, String)>,
    pub records: Vec<RunRecord>,
}

/// Executes every run in the config, resuming past work found in the output
/// directory. Single-run failures are quarantined and the sweep continues.
/// Afterwards the records are merged into curves.csv and, when any records
/// exist, selection reports are written next to it.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let records_dir = cfg.out_dir.join("records");
    let quarantine_dir = cfg.out_dir.join("quarantine");
    fs::create_dir_all(&records_dir)?;
    fs::create_dir_all(&quarantine_dir)?;

    // Echo the exact configuration for provenance, and refuse to mix
    // records produced under a different one.
    let echo = emit_config(cfg);
    let config_path = cfg.out_dir.join("config.toml");
    if config_path.exists() {
        let existing = fs::read_to_string(&config_path)?;
        if existing != echo {
            return Err(Error::config(format!(
                "{} holds records for a different configuration; use a fresh \
                 output directory or delete it",
                cfg.out_dir.display()
            )));
        }
    } else {
        fs::write(&config_path, &echo)?;
    }

    let runs = cfg.enumerate_runs()?;
    let mut datasets: BTreeMap<&'static str, tasks::Dataset> = BTreeMap::new();
    let mut outcome = SweepOutcome {
        completed: Vec::new(),
        skipped: Vec::new(),
        failed: Vec::new(),
        records: Vec::new(),
    };

    for (i, run) in runs.iter().enumerate() {
        let shard = records_dir.join(format!("{}.csv", run.id()));
        let done = records_dir.join(format!("{}.done", run.id()));
        if done.exists() && shard.exists() {
            match parse_records(&fs::read_to_string(&shard)?) {
                Ok(rows) if !rows.is_empty() => {
                    eprintln!("[{}/{}] {} already complete ({} records)", i + 1, runs.len(), run.id(), rows.len());
                    outcome.records.extend(rows);
                    outcome.skipped.push(*run);
                    continue;
                }
                _ => {
                    // Unreadable or empty shard: redo the run.
                    fs::remove_file(&done)?;
                }
            }
        }

        if !datasets.contains_key(run.task.name()) {
            let data = tasks::generate(run.task, cfg.dataset_size, dataset_seed(cfg.base_seed, run.task))?;
            datasets.insert(run.task.name(), data);
        }
        let data = &datasets[run.task.name()];

        eprintln!("[{}/{}] {} (seed {})", i + 1, runs.len(), run.id(), run.seed);
        match execute_run(cfg, run, data, &shard) {
            Ok(rows) => {
                fs::write(&done, format!("records={}\n", rows.len()))?;
                outcome.records.extend(rows);
                outcome.completed.push(*run);
            }
            Err(e) => {
                let msg = e.to_string();
                eprintln!("    quarantined: {msg}");
                fs::write(quarantine_dir.join(format!("{}.err", run.id())), format!("{msg}\n"))?;
                if shard.exists() {
                    fs::rename(&shard, quarantine_dir.join(format!("{}.partial.csv", run.id())))?;
                }
                outcome.failed.push((*run, msg));
            }
        }
    }

    check_run_invariants(&outcome.records)?;
    if outcome.records.is_empty() {
        eprintln!("no records produced; skipping reports");
        return Ok(outcome);
    }
    let report = select_models(&outcome.records)?;
    emit_reports(&outcome.records, &report, &cfg.out_dir)?;
    Ok(outcome)
}

/// Runs one grid cell, appending a CSV row to `shard` as each pass
/// finishes so a crash loses at most the in-flight pass.
fn execute_run(
    cfg: &ExperimentConfig,
    run: &RunSpec,
    data: &tasks::Dataset,
    shard: &Path,
) -> Result<Vec<RunRecord>> {
    let spec = task_spec(run.task);
    let model = build_model(&spec.layers, &spec.input_shape, spec.output_activation, run.seed)?;

    let defaults = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: cfg.train.epochs.unwrap_or(spec.epochs),
        batch_size: cfg.train.batch_size.unwrap_or(defaults.batch_size),
        learning_rate: cfg.train.learning_rate.unwrap_or(defaults.learning_rate),
        weight_decay: cfg.train.weight_decay.unwrap_or(defaults.weight_decay),
        plateau_patience: cfg.train.plateau_patience.unwrap_or(defaults.plateau_patience),
        seed: run.seed,
    };
    let lottery_cfg = LotteryConfig {
        strategy: run.strategy,
        criterion: run.criterion,
        scope: run.scope,
        prune_rate: cfg.prune_rate,
        iterations: cfg.iterations,
        rewind_fraction: cfg.rewind_fraction,
    };

    let mut file = fs::File::create(shard)?;
    file.write_all(CURVES_HEADER.as_bytes())?;
    file.write_all(b"\n")?;
    let mut rows: Vec<RunRecord> = Vec::new();
    let mut io_err: Option<std::io::Error> = None;
    let mut rewinds = 0usize;
    let mut final_model = None;
    lottery_run_observed(model, data, &lottery_cfg, &train_cfg, cfg.timing, &mut |event| {
        match event {
            LotteryEvent::Trained { model, .. } => final_model = Some(model.clone()),
            LotteryEvent::Measured { record } => {
                let row = RunRecord {
                    task: run.task.name().to_string(),
                    strategy: run.strategy.name().to_string(),
                    criterion: run.criterion.name().to_string(),
                    scope: run.scope.name().to_string(),
                    seed: run.seed,
                    rec: record.clone(),
                };
                let line = row.csv_row();
                if let Err(e) = file.write_all(line.as_bytes()).and_then(|()| file.flush()) {
                    io_err.get_or_insert(e);
                }
                rows.push(row);
            }
            LotteryEvent::Rewound { .. } => rewinds += 1,
            _ => {}
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    // Auditable strategy behavior: finetune never rewinds, the others
    // rewind on every pass that removed something.
    writeln!(file, "# rewinds={rewinds}")?;
    if let Some(m) = &final_model {
        crate::checkpoint::save_model(m, &shard.with_extension("model"))?;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Model selection
// ---------------------------------------------------------------------------

/// A selected model: the median-seed representative record plus the spread
/// of the same selection across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct Choice {
    pub record: RunRecord,
    pub err_min: f64,
    pub err_max: f64,
}

/// Selections for one (task, strategy, criterion, scope) group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSelection {
    pub task: String,
    pub strategy: String,
    pub criterion: String,
    pub scope: String,
    pub seeds: usize,
    /// The fully trained, unpruned model (iteration 0).
    pub reference: Choice,
    /// Lowest test error over the whole run.
    pub best: Option<Choice>,
    /// Fewest remaining parameters with error within 1.5× the reference.
    pub smallest: Option<Choice>,
    /// Fewest remaining parameters with error within 1.1× the reference.
    pub optimal: Option<Choice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionReport {
    pub groups: Vec<GroupSelection>,
}

/// Picks reference/best/smallest/optimal models per run group. Thresholds
/// compare test-error *ratios* against the same-seed reference; each seed is
/// selected independently and the group reports the median seed's choice
/// (by error for "best", by size for the size-constrained picks), with the
/// min/max error spread across seeds alongside.
pub fn select_models(records: &[RunRecord]) -> Result<SelectionReport> {
    let mut groups: BTreeMap<(String, String, String, String), BTreeMap<u64, Vec<&RunRecord>>> =
        BTreeMap::new();
    for r in records {
        groups
            .entry((r.task.clone(), r.strategy.clone(), r.criterion.clone(), r.scope.clone()))
            .or_default()
            .entry(r.seed)
            .or_default()
            .push(r);
    }

    let mut out = Vec::new();
    for ((task, strategy, criterion, scope), by_seed) in groups {
        let mut references = Vec::new();
        let mut bests = Vec::new();
        let mut smallests = Vec::new();
        let mut optimals = Vec::new();
        for (seed, rows) in &by_seed {
            let reference = rows
                .iter()
                .find(|r| r.rec.iteration == 0)
                .ok_or_else(|| {
                    Error::contract(format!(
                        "seed {seed} of {task}/{strategy} has no iteration-0 reference"
                    ))
                })?;
            let ref_err = reference.rec.test_err;
            references.push((*reference).clone());
            if let Some(b) = rows
                .iter()
                .min_by(|a, b| {
                    (a.rec.test_err, a.rec.iteration)
                        .partial_cmp(&(b.rec.test_err, b.rec.iteration))
                        .unwrap()
                })
            {
                bests.push((*b).clone());
            }
            smallests.extend(pick_smallest(rows, ref_err, SMALLEST_ERR_RATIO));
            optimals.extend(pick_smallest(rows, ref_err, OPTIMAL_ERR_RATIO));
        }
        out.push(GroupSelection {
            task,
            strategy,
            criterion,
            scope,
            seeds: by_seed.len(),
            reference: median_choice(references, false)
                .expect("every seed contributed a reference"),
            best: median_choice(bests, false),
            smallest: median_choice(smallests, true),
            optimal: median_choice(optimals, true),
        });
    }
    Ok(SelectionReport { groups: out })
}

/// Smallest model whose error stays within `ratio` × the reference error.
fn pick_smallest(rows: &[&RunRecord], ref_err: f64, ratio: f64) -> Option<RunRecord> {
    rows.iter()
        .filter(|r| r.rec.test_err <= ratio * ref_err)
        .min_by(|a, b| {
            (a.rec.remaining_fraction, a.rec.test_err, a.rec.iteration)
                .partial_cmp(&(b.rec.remaining_fraction, b.rec.test_err, b.rec.iteration))
                .unwrap()
        })
        .map(|r| (*r).clone())
}

/// Median representative of per-seed picks: ordered by size (when
/// `by_size`) or error, ties broken by seed; even counts take the lower
/// middle. The error spread across all picks rides along.
fn median_choice(mut picks: Vec<RunRecord>, by_size: bool) -> Option<Choice> {
    if picks.is_empty() {
        return None;
    }
    picks.sort_by(|a, b| {
        let ka = if by_size {
            (a.rec.remaining_fraction, a.rec.test_err)
        } else {
            (a.rec.test_err, a.rec.remaining_fraction)
        };
        let kb = if by_size {
            (b.rec.remaining_fraction, b.rec.test_err)
        } else {
            (b.rec.test_err, b.rec.remaining_fraction)
        };
        ka.partial_cmp(&kb).unwrap().then(a.seed.cmp(&b.seed))
    });
    let err_min = picks.iter().map(|r| r.rec.test_err).fold(f64::INFINITY, f64::min);
    let err_max = picks.iter().map(|r| r.rec.test_err).fold(f64::NEG_INFINITY, f64::max);
    let record = picks[(picks.len() - 1) / 2].clone();
    Some(Choice { record, err_min, err_max })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Writes curves.csv (all records, sorted), table.csv (reference vs.
/// selected models), and summary.txt (normalized errors and resource
/// ratios) into `out_dir`.
pub fn emit_reports(records: &[RunRecord], report: &SelectionReport, out_dir: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(Error::contract("cannot report on zero records"));
    }
    fs::create_dir_all(out_dir)?;

    let mut sorted: Vec<&RunRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.sort_key());
    let mut curves = String::with_capacity(sorted.len() * 96);
    curves.push_str(CURVES_HEADER);
    curves.push('\n');
    for r in &sorted {
        curves.push_str(&r.csv_row());
    }
    write_file(&out_dir.join("curves.csv"), &curves)?;

    let mut table = String::new();
    table.push_str(TABLE_HEADER);
    table.push('\n');
    for g in &report.groups {
        for (label, choice) in [
            ("reference", Some(&g.reference)),
            ("best", g.best.as_ref()),
            ("smallest", g.smallest.as_ref()),
            ("optimal", g.optimal.as_ref()),
        ] {
            let Some(c) = choice else { continue };
            let r = &c.record;
            writeln!(
                table,
                "{},{},{},{},{label},{},{:.6},{},{},{},{},{:.6}",
                g.task,
                g.strategy,
                g.criterion,
                g.scope,
                r.rec.iteration,
                r.rec.test_err,
                r.rec.params,
                r.rec.disk_bytes,
                r.rec.flops,
                r.rec.memory_bytes,
                r.rec.remaining_fraction,
            )
            .expect("writing to a String cannot fail");
        }
    }
    write_file(&out_dir.join("table.csv"), &table)?;
    write_file(&out_dir.join("summary.txt"), &render_summary(report))?;
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::config(format!("cannot write {}: {e}", path.display())))
}

fn render_summary(report: &SelectionReport) -> String {
    let mut s = String::new();
    s.push_str("model selection summary\n");
    s.push_str("=======================\n");
    s.push_str(
        "Errors are shown raw and normalized by each group's reference error\n\
         (reference = fully trained unpruned model, iteration 0). Tasks use\n\
         different error metrics — the onset task scores spans by F-measure\n\
         while the classification tasks count wrong labels — so only the\n\
         normalized values are comparable across tasks.\n",
    );
    for g in &report.groups {
        let ref_err = g.reference.record.rec.test_err;
        let _ = writeln!(
            s,
            "\n== {} / {} / {} / {} ({} seed{}) ==",
            g.task,
            g.strategy,
            g.criterion,
            g.scope,
            g.seeds,
            if g.seeds == 1 { "" } else { "s" }
        );
        for (label, choice) in [
            ("reference", Some(&g.reference)),
            ("best", g.best.as_ref()),
            ("smallest", g.smallest.as_ref()),
            ("optimal", g.optimal.as_ref()),
        ] {
            match choice {
                Some(c) => {
                    let r = &c.record.rec;
                    let norm = if label == "reference" {
                        1.0
                    } else if ref_err > 0.0 {
                        r.test_err / ref_err
                    } else {
                        f64::NAN
                    };
                    let norm_txt = if norm.is_nan() { "n/a".to_string() } else { format!("{norm:.3}") };
                    let _ = writeln!(
                        s,
                        "{label:<9} iter {:>2}  err {:.6}  norm {}  remaining {:>5.1}%  \
                         params {}  flops {}  [err across seeds {:.6}..{:.6}]",
                        r.iteration,
                        r.test_err,
                        norm_txt,
                        100.0 * r.remaining_fraction,
                        r.params,
                        r.flops,
                        c.err_min,
                        c.err_max,
                    );
                }
                None => {
                    let _ = writeln!(s, "{label:<9} absent (no model met its error ceiling)");
                }
            }
        }
        if let Some(opt) = &g.optimal {
            let rr = &g.reference.record.rec;
            let or = &opt.record.rec;
            let ratio = |a: u64, b: u64| {
                if b == 0 {
                    f64::NAN
                } else {
                    a as f64 / b as f64
                }
            };
            let _ = writeln!(
                s,
                "optimal vs reference: params {:.1}x smaller, flops {:.1}x fewer, \
                 disk {:.1}x smaller, memory {:.1}x smaller",
                ratio(rr.params, or.params),
                ratio(rr.flops, or.flops),
                ratio(rr.disk_bytes, or.disk_bytes),
                ratio(rr.memory_bytes, or.memory_bytes),
            );
        }
    }
    s
}

/// Rebuilds curves.csv, table.csv, and summary.txt from the records already
/// in `out_dir` (shards if present, otherwise an existing curves.csv).
pub fn regenerate_reports(out_dir: &Path) -> Result<SelectionReport> {
    let records_dir = out_dir.join("records");
    let mut records = Vec::new();
    if records_dir.is_dir() {
        let mut shards: Vec<PathBuf> = fs::read_dir(&records_dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "csv"))
            .collect();
        shards.sort();
        for shard in shards {
            let done = shard.with_extension("done");
            if done.exists() {
                records.extend(parse_records(&fs::read_to_string(&shard)?)?);
            }
        }
    }
    if records.is_empty() {
        let curves = out_dir.join("curves.csv");
        if !curves.is_file() {
            return Err(Error::config(format!(
                "{} holds no completed records to report on",
                out_dir.display()
            )));
        }
        records = parse_records(&fs::read_to_string(&curves)?)?;
    }
    if records.is_empty() {
        return Err(Error::config(format!(
            "{} holds no completed records to report on",
            out_dir.display()
        )));
    }
    let report = select_models(&records)?;
    emit_reports(&records, &report, out_dir)?;
    Ok(report)
}
