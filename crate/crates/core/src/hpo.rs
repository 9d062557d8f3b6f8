//! Hyperparameter-optimisation frameworks for task streams.
//!
//! Each framework decides *when* hyperparameters are chosen and *which data*
//! scores a configuration:
//!
//! | framework        | selection data                          | retrain | units      |
//! |------------------|-----------------------------------------|---------|------------|
//! | end-of-training  | pooled val of all tasks, after stream   | yes     | `K*T + T`  |
//! | first-task       | val of task 1                           | yes     | `K + T`    |
//! | current-task     | val of the current task                 | yes     | `K*T + T`  |
//! | seen-tasks (Val) | val of every task seen so far           | no      | `K*T`      |
//! | seen-tasks (Mem) | current val + reserved memory sample    | yes     | `K*T + T`  |
//! | default HP       | none                                    | n/a     | `T`        |
//!
//! A unit is one configuration trained over one task, counted by
//! [`CostLedger`]. Trials of one selection phase are independent: each starts
//! from the same snapshot and draws from a seed derived from
//! `(run seed, task, config index)`, so parallel and serial runs agree.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clmethods::MethodKind;
use crate::error::{ensure, Error, Result};
use crate::evalreport::{median_per_class_accuracy, EvalReport};
use crate::seed::{self, tag};
use crate::streamgen::{Example, Task, TaskStream};

pub const LEARNING_RATES: [f64; 10] = [0.2, 0.15, 0.1, 0.075, 0.05, 0.03, 0.01, 0.0075, 0.005, 0.0025];
pub const DERPP_ALPHAS: [f64; 3] = [0.2, 0.5, 1.0];
pub const DERPP_BETAS: [f64; 3] = [0.2, 0.5, 1.0];
pub const ESMER_MARGINS: [f64; 3] = [1.5, 1.2, 1.0];

/// Learning rate used when hyperparameters are not tuned.
pub const DEFAULT_LR: f64 = 0.001;
/// Regularisation coefficient used when hyperparameters are not tuned.
pub const DEFAULT_COEFFICIENT: f64 = 1.0;

/// Default fraction of each task's memory reserved by seen-tasks (Mem).
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparamConfig {
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_margin: Option<f64>,
}

impl HyperparamConfig {
    pub fn lr_only(lr: f64) -> Self {
        HyperparamConfig {
            lr,
            alpha: None,
            beta: None,
            loss_margin: None,
        }
    }

    /// Check that exactly the fields `method` uses are set.
    pub fn validate_for(&self, method: MethodKind) -> Result<()> {
        ensure!(
            self.lr.is_finite() && self.lr > 0.0,
            Argument,
            "learning rate must be positive, got {}",
            self.lr
        );
        let wants = match method {
            MethodKind::Derpp => (true, true, false),
            MethodKind::Esmer => (false, false, true),
            _ => (false, false, false),
        };
        let has = (
            self.alpha.is_some(),
            self.beta.is_some(),
            self.loss_margin.is_some(),
        );
        ensure!(
            wants == has,
            Argument,
            "config {self} does not match the hyperparameters of {method}"
        );
        for v in [self.alpha, self.beta, self.loss_margin].into_iter().flatten() {
            ensure!(
                v.is_finite() && v >= 0.0,
                Argument,
                "coefficients must be finite and non-negative, got {v}"
            );
        }
        Ok(())
    }
}

impl fmt::Display for HyperparamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "lr={}", self.lr)?;
        if let Some(a) = self.alpha {
            write!(f, " alpha={a}")?;
        }
        if let Some(b) = self.beta {
            write!(f, " beta={b}")?;
        }
        if let Some(m) = self.loss_margin {
            write!(f, " margin={m}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    configs: Vec<HyperparamConfig>,
}

impl Grid {
    pub fn new(configs: Vec<HyperparamConfig>) -> Result<Self> {
        ensure!(!configs.is_empty(), Argument, "grid is empty");
        for (i, a) in configs.iter().enumerate() {
            ensure!(
                !configs[..i].contains(a),
                Argument,
                "duplicate grid entry {a}"
            );
        }
        Ok(Grid { configs })
    }

    pub fn configs(&self) -> &[HyperparamConfig] {
        &self.configs
    }

    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }
}

/// Full search grid for `method`: learning rates crossed with its coefficients.
pub fn make_grid(method: MethodKind) -> Grid {
    let mut configs = Vec::new();
    for &lr in &LEARNING_RATES {
        match method {
            MethodKind::Derpp => {
                for &alpha in &DERPP_ALPHAS {
                    for &beta in &DERPP_BETAS {
                        configs.push(HyperparamConfig {
                            alpha: Some(alpha),
                            beta: Some(beta),
                            ..HyperparamConfig::lr_only(lr)
                        });
                    }
                }
            }
            MethodKind::Esmer => {
                for &m in &ESMER_MARGINS {
                    configs.push(HyperparamConfig {
                        loss_margin: Some(m),
                        ..HyperparamConfig::lr_only(lr)
                    });
                }
            }
            _ => configs.push(HyperparamConfig::lr_only(lr)),
        }
    }
    Grid { configs }
}

/// Untuned configuration: lr 0.001 and every coefficient 1.0.
pub fn default_config(method: MethodKind) -> HyperparamConfig {
    let mut hp = HyperparamConfig::lr_only(DEFAULT_LR);
    match method {
        MethodKind::Derpp => {
            hp.alpha = Some(DEFAULT_COEFFICIENT);
            hp.beta = Some(DEFAULT_COEFFICIENT);
        }
        MethodKind::Esmer => hp.loss_margin = Some(DEFAULT_COEFFICIENT),
        _ => {}
    }
    hp
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Selection,
    Retrain,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCost {
    pub selection: u64,
    pub retrain: u64,
}

/// Exact count of task-training units spent by a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub selection_units: u64,
    pub retrain_units: u64,
    pub per_task: Vec<TaskCost>,
}

impl CostLedger {
    pub fn record(&mut self, phase: Phase, task_id: usize) {
        if self.per_task.len() <= task_id {
            self.per_task.resize(task_id + 1, TaskCost::default());
        }
        match phase {
            Phase::Selection => {
                self.selection_units += 1;
                self.per_task[task_id].selection += 1;
            }
            Phase::Retrain => {
                self.retrain_units += 1;
                self.per_task[task_id].retrain += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &CostLedger) {
        self.selection_units += other.selection_units;
        self.retrain_units += other.retrain_units;
        if self.per_task.len() < other.per_task.len() {
            self.per_task.resize(other.per_task.len(), TaskCost::default());
        }
        for (a, b) in self.per_task.iter_mut().zip(&other.per_task) {
            a.selection += b.selection;
            a.retrain += b.retrain;
        }
    }

    pub fn total(&self) -> u64 {
        self.selection_units + self.retrain_units
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    EndOfTraining,
    FirstTask,
    CurrentTask,
    SeenTasksVal,
    SeenTasksMem,
    DefaultHp,
}

impl Framework {
    pub const ALL: [Framework; 6] = [
        Framework::EndOfTraining,
        Framework::FirstTask,
        Framework::CurrentTask,
        Framework::SeenTasksVal,
        Framework::SeenTasksMem,
        Framework::DefaultHp,
    ];

    /// The five tuning frameworks, without the untuned baseline.
    pub const HPO: [Framework; 5] = [
        Framework::EndOfTraining,
        Framework::FirstTask,
        Framework::CurrentTask,
        Framework::SeenTasksVal,
        Framework::SeenTasksMem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Framework::EndOfTraining => "end_of_training",
            Framework::FirstTask => "first_task",
            Framework::CurrentTask => "current_task",
            Framework::SeenTasksVal => "seen_tasks_val",
            Framework::SeenTasksMem => "seen_tasks_mem",
            Framework::DefaultHp => "default_hp",
        }
    }

    /// Static frameworks keep one configuration for the whole stream.
    pub fn is_static(self) -> bool {
        matches!(
            self,
            Framework::EndOfTraining | Framework::FirstTask | Framework::DefaultHp
        )
    }

    /// Closed-form unit count for `k` configurations over `t` tasks.
    pub fn expected_units(self, k: u64, t: u64) -> u64 {
        match self {
            Framework::EndOfTraining | Framework::CurrentTask | Framework::SeenTasksMem => {
                k * t + t
            }
            Framework::FirstTask => k + t,
            Framework::SeenTasksVal => k * t,
            Framework::DefaultHp => t,
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Framework::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Framework::ALL.iter().map(|f| f.name()).collect();
                Error::Argument(format!(
                    "unknown framework '{s}'; valid values: {}",
                    valid.join(", ")
                ))
            })
    }
}

/// What an HPO framework needs from a continual learner.
pub trait Learner: Clone + Send + Sync {
    /// Train on `data` (drawn from `task`) and record one unit in `ledger`.
    fn train_task(
        &mut self,
        task: &Task,
        data: &[Example],
        hp: &HyperparamConfig,
        seed: u64,
        phase: Phase,
        ledger: &mut CostLedger,
    ) -> Result<()>;

    /// Predicted labels; `candidates` restricts the output classes.
    fn predict(&self, batch: &[Example], candidates: Option<&[usize]>) -> Result<Vec<usize>>;

    /// Reserve a per-task-proportional sample of memory for validation and
    /// return the reserved examples. Reserved entries must not be replayed.
    fn hold_out_memory(&mut self, task_id: usize, fraction: f64, seed: u64) -> Result<Vec<Example>>;

    fn release_memory_holdout(&mut self);
}

/// Score of one configuration in one selection phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub config_index: usize,
    pub config: HyperparamConfig,
    pub score: f64,
    /// Per-task validation accuracy where the framework scores several tasks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_task: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPhase {
    /// Task whose selection this was; `None` for whole-stream selection.
    pub task: Option<usize>,
    pub trials: Vec<TrialScore>,
    pub chosen_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Run the trials of a selection phase on the rayon pool.
    pub parallel: bool,
}

impl RunOptions {
    pub fn new(seed: u64) -> Self {
        RunOptions {
            seed,
            holdout_fraction: DEFAULT_HOLDOUT_FRACTION,
            parallel: false,
        }
    }

    fn trial_seed(&self, task: usize, config: usize) -> u64 {
        seed::derive(self.seed, &[tag::TRIAL, task as u64, config as u64])
    }

    fn retrain_seed(&self, task: usize) -> u64 {
        seed::derive(self.seed, &[tag::RETRAIN, task as u64])
    }
}

/// Everything a framework run produces except evaluation.
#[derive(Debug, Clone)]
pub struct RunOutcome<L> {
    pub framework: Framework,
    /// Configuration used for each task's final training.
    pub chosen_configs: Vec<HyperparamConfig>,
    pub ledger: CostLedger,
    pub selections: Vec<SelectionPhase>,
    pub learner: L,
}

/// Persisted summary of one (method, framework, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: String,
    pub framework: Framework,
    pub method: MethodKind,
    pub seed: u64,
    /// iCaRL and ESMER use simplified formulations.
    pub simplified_method: bool,
    pub chosen_configs: Vec<HyperparamConfig>,
    pub ledger: CostLedger,
    pub eval: EvalReport,
}

/// Highest score wins; ties go to the earliest entry. NaN never wins.
pub fn select_best_index(scores: &[f64]) -> Result<usize> {
    ensure!(!scores.is_empty(), Argument, "no scores to select from");
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if key(s) > key(scores[best]) {
            best = i;
        }
    }
    Ok(best)
}

pub fn select_best(scores: &[(HyperparamConfig, f64)]) -> Result<HyperparamConfig> {
    let values: Vec<f64> = scores.iter().map(|(_, s)| *s).collect();
    Ok(scores[select_best_index(&values)?].0.clone())
}

/// Class-IL accuracy of `learner` on `examples`.
pub fn accuracy<L: Learner>(learner: &L, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(0.0);
    }
    let preds = learner.predict(examples, None)?;
    let correct = preds
        .iter()
        .zip(examples)
        .filter(|(p, e)| **p == e.label)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

struct Trial<L> {
    learner: Option<L>,
    ledger: CostLedger,
    score: f64,
    per_task: Vec<f64>,
}

/// Evaluate every grid entry with `run`. Numeric failures (divergence) give a
/// trial score of negative infinity; other errors abort the phase.
fn run_trials<L, F>(grid: &Grid, parallel: bool, run: F) -> Result<Vec<Trial<L>>>
where
    L: Learner,
    F: Fn(usize, &HyperparamConfig) -> Result<Trial<L>> + Sync,
{
    let guarded = |(i, hp): (usize, &HyperparamConfig)| run(i, hp);
    let results: Vec<Result<Trial<L>>> = if parallel {
        grid.configs().par_iter().enumerate().map(guarded).collect()
    } else {
        grid.configs().iter().enumerate().map(guarded).collect()
    };
    results.into_iter().collect()
}

/// Train a trial over `tasks`, converting divergence into a failed trial.
fn train_trial<L: Learner>(
    mut learner: L,
    steps: &[(&Task, Vec<Example>, u64)],
    hp: &HyperparamConfig,
    ledger: &mut CostLedger,
) -> Result<Option<L>> {
    for (task, data, seed) in steps {
        match learner.train_task(task, data, hp, *seed, Phase::Selection, ledger) {
            Ok(()) => {}
            Err(Error::Numeric(msg)) => {
                log::warn!("trial {hp} diverged on task {}: {msg}", task.task_id);
                return Ok(None);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Some(learner))
}

fn finish_phase<L>(
    task: Option<usize>,
    grid: &Grid,
    trials: &mut [Trial<L>],
    ledger: &mut CostLedger,
) -> Result<SelectionPhase> {
    for t in trials.iter() {
        ledger.merge(&t.ledger);
    }
    let scores: Vec<f64> = trials.iter().map(|t| t.score).collect();
    let chosen_index = select_best_index(&scores)?;
    ensure!(
        trials[chosen_index].score.is_finite(),
        Numeric,
        "every configuration diverged"
    );
    Ok(SelectionPhase {
        task,
        trials: trials
            .iter()
            .enumerate()
            .map(|(i, t)| TrialScore {
                config_index: i,
                config: grid.configs()[i].clone(),
                score: t.score,
                per_task: t.per_task.clone(),
            })
            .collect(),
        chosen_index,
    })
}

fn check_stream(stream: &TaskStream) -> Result<()> {
    ensure!(!stream.is_empty(), Argument, "stream has no tasks");
    for t in &stream.tasks {
        ensure!(
            !t.val.is_empty(),
            Argument,
            "task {} has no validation split",
            t.task_id
        );
    }
    Ok(())
}

/// Train every configuration over the whole stream, score on the pooled
/// validation sets, then retrain the winner on train+val of every task.
pub fn run_end_of_training<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    check_stream(stream)?;
    let mut trials = run_trials(grid, opts.parallel, |c, hp| {
        let steps: Vec<_> = stream
            .tasks
            .iter()
            .enumerate()
            .map(|(i, t)| (t, t.train.clone(), opts.trial_seed(i, c)))
            .collect();
        let mut ledger = CostLedger::default();
        let learner = train_trial(init.clone(), &steps, hp, &mut ledger)?;
        let (score, per_task) = match &learner {
            Some(l) => pooled_val_score(l, stream)?,
            None => (f64::NEG_INFINITY, Vec::new()),
        };
        Ok(Trial::<L> {
            learner: None,
            ledger,
            score,
            per_task,
        })
    })?;
    let mut ledger = CostLedger::default();
    let phase = finish_phase(None, grid, &mut trials, &mut ledger)?;
    let best = grid.configs()[phase.chosen_index].clone();

    let mut learner = init.clone();
    for (i, task) in stream.tasks.iter().enumerate() {
        learner.train_task(
            task,
            &task.train_and_val(),
            &best,
            opts.retrain_seed(i),
            Phase::Retrain,
            &mut ledger,
        )?;
    }
    Ok(RunOutcome {
        framework: Framework::EndOfTraining,
        chosen_configs: vec![best; stream.len()],
        ledger,
        selections: vec![phase],
        learner,
    })
}

/// Pooled class-IL validation accuracy, weighted by example count, plus the
/// per-task accuracies.
fn pooled_val_score<L: Learner>(learner: &L, stream: &TaskStream) -> Result<(f64, Vec<f64>)> {
    let mut correct = 0.0;
    let mut total = 0usize;
    let mut per_task = Vec::with_capacity(stream.len());
    for t in &stream.tasks {
        let acc = accuracy(learner, &t.val)?;
        correct += acc * t.val.len() as f64;
        total += t.val.len();
        per_task.push(acc);
    }
    Ok((correct / total.max(1) as f64, per_task))
}

/// Select on the first task only, then keep that configuration.
pub fn run_first_task<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    check_stream(stream)?;
    let first = &stream.tasks[0];
    let mut trials = run_trials(grid, opts.parallel, |c, hp| {
        let mut ledger = CostLedger::default();
        let steps = [(first, first.train.clone(), opts.trial_seed(0, c))];
        let learner = train_trial(init.clone(), &steps, hp, &mut ledger)?;
        let score = match &learner {
            Some(l) => accuracy(l, &first.val)?,
            None => f64::NEG_INFINITY,
        };
        Ok(Trial::<L> {
            learner: None,
            ledger,
            score,
            per_task: Vec::new(),
        })
    })?;
    let mut ledger = CostLedger::default();
    let phase = finish_phase(Some(0), grid, &mut trials, &mut ledger)?;
    let best = grid.configs()[phase.chosen_index].clone();

    let mut learner = init.clone();
    for (i, task) in stream.tasks.iter().enumerate() {
        learner.train_task(
            task,
            &task.train_and_val(),
            &best,
            opts.retrain_seed(i),
            Phase::Retrain,
            &mut ledger,
        )?;
    }
    Ok(RunOutcome {
        framework: Framework::FirstTask,
        chosen_configs: vec![best; stream.len()],
        ledger,
        selections: vec![phase],
        learner,
    })
}

/// Per task: choose by the current task's validation accuracy, then retrain
/// the task from the pre-task snapshot on train+val.
pub fn run_current_task<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    run_dynamic(stream, grid, init, opts, Framework::CurrentTask)
}

/// Per task: choose by accuracy on the validation sets of every task seen so
/// far and keep the winning trial's model. Validation data is never trained on.
pub fn run_seen_tasks_val<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    run_dynamic(stream, grid, init, opts, Framework::SeenTasksVal)
}

/// Per task: validate on the current val set plus a reserved sample of the
/// replay memory, scoring by median per-class accuracy; reserved memory is not
/// replayed during trials. Then retrain on train+val.
pub fn run_seen_tasks_mem<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    run_dynamic(stream, grid, init, opts, Framework::SeenTasksMem)
}

fn run_dynamic<L: Learner>(
    stream: &TaskStream,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
    framework: Framework,
) -> Result<RunOutcome<L>> {
    check_stream(stream)?;
    let mut ledger = CostLedger::default();
    let mut selections = Vec::with_capacity(stream.len());
    let mut chosen_configs = Vec::with_capacity(stream.len());
    let mut state = init.clone();

    for (i, task) in stream.tasks.iter().enumerate() {
        let validation: Vec<Example> = match framework {
            Framework::CurrentTask => task.val.clone(),
            Framework::SeenTasksVal => stream.tasks[..=i]
                .iter()
                .flat_map(|t| t.val.iter().cloned())
                .collect(),
            Framework::SeenTasksMem => {
                let holdout_seed = seed::derive(opts.seed, &[tag::HOLDOUT, i as u64]);
                let mut v = task.val.clone();
                v.extend(state.hold_out_memory(i, opts.holdout_fraction, holdout_seed)?);
                v
            }
            _ => unreachable!("static framework in dynamic runner"),
        };
        let keep_learner = framework == Framework::SeenTasksVal;

        let snapshot = &state;
        let mut trials = run_trials(grid, opts.parallel, |c, hp| {
            let mut trial_ledger = CostLedger::default();
            let steps = [(task, task.train.clone(), opts.trial_seed(i, c))];
            let learner = train_trial(snapshot.clone(), &steps, hp, &mut trial_ledger)?;
            let score = match &learner {
                Some(l) if framework == Framework::SeenTasksMem => {
                    let preds = l.predict(&validation, None)?;
                    let pairs: Vec<(usize, usize)> = validation
                        .iter()
                        .zip(preds)
                        .map(|(e, p)| (e.label, p))
                        .collect();
                    median_per_class_accuracy(&pairs)?
                }
                Some(l) => accuracy(l, &validation)?,
                None => f64::NEG_INFINITY,
            };
            Ok(Trial {
                learner: if keep_learner { learner } else { None },
                ledger: trial_ledger,
                score,
                per_task: Vec::new(),
            })
        })?;
        let phase = finish_phase(Some(i), grid, &mut trials, &mut ledger)?;
        let best = grid.configs()[phase.chosen_index].clone();

        if keep_learner {
            state = trials[phase.chosen_index]
                .learner
                .take()
                .expect("winning trial has a finite score");
        } else {
            state.release_memory_holdout();
            state.train_task(
                task,
                &task.train_and_val(),
                &best,
                opts.retrain_seed(i),
                Phase::Retrain,
                &mut ledger,
            )?;
        }
        selections.push(phase);
        chosen_configs.push(best);
    }
    Ok(RunOutcome {
        framework,
        chosen_configs,
        ledger,
        selections,
        learner: state,
    })
}

/// No tuning: train once over the stream (train+val) with
/// [`default_config`].
pub fn run_default_hp<L: Learner>(
    stream: &TaskStream,
    method: MethodKind,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    ensure!(!stream.is_empty(), Argument, "stream has no tasks");
    let hp = default_config(method);
    let mut ledger = CostLedger::default();
    let mut learner = init.clone();
    for (i, task) in stream.tasks.iter().enumerate() {
        learner.train_task(
            task,
            &task.train_and_val(),
            &hp,
            opts.retrain_seed(i),
            Phase::Retrain,
            &mut ledger,
        )?;
    }
    Ok(RunOutcome {
        framework: Framework::DefaultHp,
        chosen_configs: vec![hp; stream.len()],
        ledger,
        selections: Vec::new(),
        learner,
    })
}

/// Dispatch on `framework`. `grid` is ignored by [`Framework::DefaultHp`].
pub fn run_framework<L: Learner>(
    framework: Framework,
    stream: &TaskStream,
    method: MethodKind,
    grid: &Grid,
    init: &L,
    opts: &RunOptions,
) -> Result<RunOutcome<L>> {
    match framework {
        Framework::EndOfTraining => run_end_of_training(stream, grid, init, opts),
        Framework::FirstTask => run_first_task(stream, grid, init, opts),
        Framework::CurrentTask => run_current_task(stream, grid, init, opts),
        Framework::SeenTasksVal => run_seen_tasks_val(stream, grid, init, opts),
        Framework::SeenTasksMem => run_seen_tasks_mem(stream, grid, init, opts),
        Framework::DefaultHp => run_default_hp(stream, method, init, opts),
    }
}

/// Learner that trains nothing and only counts units. Predicts the first
/// candidate class. Used to certify ledger arithmetic cheaply.
#[derive(Debug, Clone, Default)]
pub struct CountingLearner {
    pub trained: Vec<(usize, HyperparamConfig)>,
}

impl Learner for CountingLearner {
    fn train_task(
        &mut self,
        task: &Task,
        _data: &[Example],
        hp: &HyperparamConfig,
        _seed: u64,
        phase: Phase,
        ledger: &mut CostLedger,
    ) -> Result<()> {
        self.trained.push((task.task_id, hp.clone()));
        ledger.record(phase, task.task_id);
        Ok(())
    }

    fn predict(&self, batch: &[Example], candidates: Option<&[usize]>) -> Result<Vec<usize>> {
        let class = candidates.and_then(|c| c.first().copied()).unwrap_or(0);
        Ok(vec![class; batch.len()])
    }

    fn hold_out_memory(&mut self, _: usize, _: f64, _: u64) -> Result<Vec<Example>> {
        Ok(Vec::new())
    }

    fn release_memory_holdout(&mut self) {}
}

/// Measured units for every framework against its closed form over a
/// `(K, T)` sweep, using [`CountingLearner`].
pub fn ledger_sweep(ks: &[usize], ts: &[usize]) -> Result<Vec<LedgerCheck>> {
    let mut out = Vec::new();
    for &t in ts {
        let dataset = crate::streamgen::synth_gaussian(2 * t.max(1), 2, 10, 3.0, 0)?;
        let stream = crate::streamgen::build_split_stream(&dataset, t, 0)?.with_val_split(0.1, 0)?;
        for &k in ks {
            let grid = Grid::new(
                LEARNING_RATES[..k.min(LEARNING_RATES.len())]
                    .iter()
                    .map(|&lr| HyperparamConfig::lr_only(lr))
                    .collect(),
            )?;
            for framework in Framework::ALL {
                let outcome = run_framework(
                    framework,
                    &stream,
                    MethodKind::Er,
                    &grid,
                    &CountingLearner::default(),
                    &RunOptions::new(0),
                )?;
                out.push(LedgerCheck {
                    framework,
                    k,
                    t,
                    measured: outcome.ledger.total(),
                    expected: framework.expected_units(k as u64, t as u64),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerCheck {
    pub framework: Framework,
    pub k: usize,
    pub t: usize,
    pub measured: u64,
    pub expected: u64,
}

impl RunRecord {
    pub const SCHEMA: &'static str = "clhpo-run-v1";

    pub fn new<L>(outcome: &RunOutcome<L>, method: MethodKind, seed: u64, eval: EvalReport) -> Self {
        RunRecord {
            schema: Self::SCHEMA.to_string(),
            framework: outcome.framework,
            method,
            seed,
            simplified_method: method.is_simplified(),
            chosen_configs: outcome.chosen_configs.clone(),
            ledger: outcome.ledger.clone(),
            eval,
        }
    }
}
