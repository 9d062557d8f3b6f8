//! Replay-based continual-learning methods behind one trainer.
//!
//! ER, ER-ACE and DER++ follow their usual formulations at MLP scale. iCaRL
//! and ESMER are simplified: iCaRL keeps herding exemplars, classifies by
//! nearest mean of exemplars and distils the pre-task model's probabilities
//! on replayed inputs; ESMER down-weights current-batch examples whose loss
//! exceeds `margin * running_mean_loss` and distils an EMA "stable" model's
//! logits on replayed inputs.
//!
//! Buffer insertion happens once per task, after the last gradient step, so
//! replay only ever shows examples from earlier tasks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::hpo::{CostLedger, HyperparamConfig, Learner, Phase};
use crate::memory::{ema_update, BufferEntry, ReplayBuffer};
use crate::neural::{
    init_mlp, loss_and_grad, mse_logit_loss_and_grad, sgd_step, soft_target_loss_and_grad,
    softmax_cross_entropy, GradientSet, Matrix, MlpModel,
};
use crate::seed::{self, tag};
use crate::streamgen::{Example, Task};

/// Momentum of ESMER's running mean of the per-example loss.
pub const ESMER_LOSS_MOMENTUM: f64 = 0.99;
/// Weight of ESMER's logit distillation toward the stable model.
pub const ESMER_DISTILL_WEIGHT: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Er,
    ErAce,
    Derpp,
    Icarl,
    Esmer,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Er,
        MethodKind::ErAce,
        MethodKind::Icarl,
        MethodKind::Esmer,
        MethodKind::Derpp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Er => "er",
            MethodKind::ErAce => "er_ace",
            MethodKind::Derpp => "derpp",
            MethodKind::Icarl => "icarl",
            MethodKind::Esmer => "esmer",
        }
    }

    /// Results for these methods come from simplified formulations.
    pub fn is_simplified(self) -> bool {
        matches!(self, MethodKind::Icarl | MethodKind::Esmer)
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Argument(format!(
                    "unknown method '{s}'; valid values: er, er_ace, derpp, icarl, esmer"
                ))
            })
    }
}

/// Training knobs shared by every method.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    /// Hidden layer widths; input and output widths come from the stream.
    pub hidden: Vec<usize>,
    /// ESMER stable-model EMA decay.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            batch_size: 32,
            buffer_capacity: 512,
            hidden: vec![64],
            ema_decay: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IcarlState {
    /// Snapshot of the model taken at the start of the current task.
    pub previous: Option<MlpModel>,
    /// Mean embedding of each class's exemplars.
    pub class_means: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EsmerState {
    pub stable: MlpModel,
    pub loss_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum MethodAux {
    None,
    Icarl(IcarlState),
    Esmer(EsmerState),
}

/// Example ids that went through gradient steps, split by role.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepIds {
    pub current: BTreeSet<usize>,
    pub replay: BTreeSet<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceLog {
    /// Keyed by (phase, task id).
    pub steps: BTreeMap<(Phase, usize), StepIds>,
    /// Memory ids reserved for validation, keyed by task id.
    pub holdouts: BTreeMap<usize, BTreeSet<usize>>,
}

impl TraceLog {
    pub fn trained_ids(&self) -> BTreeSet<usize> {
        self.steps
            .values()
            .flat_map(|s| s.current.iter().chain(&s.replay))
            .copied()
            .collect()
    }
}

/// Instrumentation sink shared by a trainer and every clone made from it.
#[derive(Debug, Default)]
pub struct TrainTrace {
    log: Mutex<TraceLog>,
}

impl TrainTrace {
    pub fn snapshot(&self) -> TraceLog {
        self.log.lock().expect("trace lock").clone()
    }

    fn record_step(&self, phase: Phase, task: usize, current: &[Example], replay: &[usize]) {
        let mut log = self.log.lock().expect("trace lock");
        let ids = log.steps.entry((phase, task)).or_default();
        ids.current.extend(current.iter().map(|e| e.id));
        ids.replay.extend(replay.iter().copied());
    }

    fn record_holdout(&self, task: usize, ids: &BTreeSet<usize>) {
        let mut log = self.log.lock().expect("trace lock");
        log.holdouts.entry(task).or_default().extend(ids.iter().copied());
    }
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub model: MlpModel,
    pub buffer: ReplayBuffer,
    pub method: MethodKind,
    pub seen_classes: BTreeSet<usize>,
    pub aux: MethodAux,
    pub config: TrainConfig,
    trace: Option<Arc<TrainTrace>>,
}

impl TrainerState {
    pub fn new(
        method: MethodKind,
        input_dim: usize,
        n_classes: usize,
        config: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        ensure!(config.epochs >= 1, Argument, "epochs must be >= 1");
        ensure!(config.batch_size >= 1, Argument, "batch_size must be >= 1");
        let mut dims = vec![input_dim];
        dims.extend(&config.hidden);
        dims.push(n_classes);
        let model = init_mlp(&dims, seed)?;
        let aux = match method {
            MethodKind::Icarl => MethodAux::Icarl(IcarlState {
                previous: None,
                class_means: BTreeMap::new(),
            }),
            MethodKind::Esmer => MethodAux::Esmer(EsmerState {
                stable: model.clone(),
                loss_mean: None,
            }),
            _ => MethodAux::None,
        };
        Ok(TrainerState {
            buffer: ReplayBuffer::new(config.buffer_capacity, n_classes),
            model,
            method,
            seen_classes: BTreeSet::new(),
            aux,
            config,
            trace: None,
        })
    }

    /// Attach an instrumentation sink; clones share it.
    pub fn with_trace(mut self, trace: Arc<TrainTrace>) -> Self {
        self.trace = Some(trace);
        self
    }

    pub fn n_classes(&self) -> usize {
        self.model.output_dim()
    }

    fn replay_examples<R: rand::Rng>(&self, k: usize, rng: &mut R) -> Vec<Example> {
        self.buffer
            .sample_batch(k, rng)
            .into_iter()
            .map(|e| e.example.clone())
            .collect()
    }

    /// Train on one task's data with `hp`. Adds exactly one unit to `ledger`.
    pub fn train_task(
        &mut self,
        task: &Task,
        data: &[Example],
        hp: &HyperparamConfig,
        seed: u64,
        phase: Phase,
        ledger: &mut CostLedger,
    ) -> Result<()> {
        hp.validate_for(self.method)?;
        if let Some(c) = task.classes.iter().find(|c| self.seen_classes.contains(c)) {
            return Err(Error::Stream(format!(
                "task {} reuses class {c}, which was already trained on",
                task.task_id
            )));
        }
        if let Some(ex) = data.iter().find(|e| !task.owns(e.label)) {
            return Err(Error::Stream(format!(
                "example {} has label {} outside task {}",
                ex.id, ex.label, task.task_id
            )));
        }
        // The unit is spent once training starts, even if it later diverges.
        ledger.record(phase, task.task_id);
        if let MethodAux::Icarl(st) = &mut self.aux {
            st.previous = (!self.seen_classes.is_empty()).then(|| self.model.clone());
        }

        let bs = self.config.batch_size;
        let schedule = batch_schedule(
            data.len(),
            bs,
            self.config.epochs,
            seed::derive(seed, &[tag::SHUFFLE]),
        );
        let mut replay_rng = seed::rng(seed::derive(seed, &[tag::REPLAY]));

        for indices in schedule {
            let current: Vec<Example> = indices.iter().map(|&i| data[i].clone()).collect();
            let mut replay_ids = Vec::new();
            let (_, grads) = match self.method {
                MethodKind::Er => {
                    let replay = self.replay_examples(bs, &mut replay_rng);
                    replay_ids.extend(replay.iter().map(|e| e.id));
                    batch_loss_er(self, &current, &replay)?
                }
                MethodKind::ErAce => {
                    let replay = self.replay_examples(bs, &mut replay_rng);
                    replay_ids.extend(replay.iter().map(|e| e.id));
                    batch_loss_er_ace(self, &current, &replay, &task.classes)?
                }
                MethodKind::Derpp => {
                    let alpha = hp.alpha.unwrap_or(0.0);
                    let beta = hp.beta.unwrap_or(0.0);
                    let first: Vec<BufferEntry> = if alpha != 0.0 {
                        self.buffer
                            .sample_batch(bs, &mut replay_rng)
                            .into_iter()
                            .cloned()
                            .collect()
                    } else {
                        Vec::new()
                    };
                    let second = if beta != 0.0 {
                        self.replay_examples(bs, &mut replay_rng)
                    } else {
                        Vec::new()
                    };
                    replay_ids.extend(first.iter().map(|e| e.example.id));
                    replay_ids.extend(second.iter().map(|e| e.id));
                    batch_loss_derpp(self, &current, &first, &second, hp)?
                }
                MethodKind::Icarl => {
                    let replay = self.replay_examples(bs, &mut replay_rng);
                    replay_ids.extend(replay.iter().map(|e| e.id));
                    batch_loss_icarl(self, &current, &replay)?
                }
                MethodKind::Esmer => {
                    let replay = self.replay_examples(bs, &mut replay_rng);
                    replay_ids.extend(replay.iter().map(|e| e.id));
                    let step = batch_loss_esmer(self, &current, &replay, hp)?;
                    if let MethodAux::Esmer(st) = &mut self.aux {
                        st.loss_mean = Some(match st.loss_mean {
                            None => step.batch_mean_loss,
                            Some(m) => {
                                ESMER_LOSS_MOMENTUM * m
                                    + (1.0 - ESMER_LOSS_MOMENTUM) * step.batch_mean_loss
                            }
                        });
                    }
                    (step.loss, step.grads)
                }
            };
            if let Some(trace) = &self.trace {
                trace.record_step(phase, task.task_id, &current, &replay_ids);
            }
            sgd_step(&mut self.model, &grads, hp.lr)?;
            if let MethodAux::Esmer(st) = &mut self.aux {
                ema_update(&mut st.stable, &self.model, self.config.ema_decay)?;
            }
        }

        self.seen_classes.extend(task.classes.iter().copied());
        if self.method == MethodKind::Icarl {
            self.rebuild_exemplars(task, data)?;
        } else {
            let mut insert_rng = seed::rng(seed::derive(seed, &[tag::INSERT]));
            let logits = if self.method == MethodKind::Derpp {
                Some(self.model.forward(data)?)
            } else {
                None
            };
            for (i, ex) in data.iter().enumerate() {
                let stored = logits.as_ref().map(|l| l.row(i).to_vec());
                self.buffer
                    .reservoir_insert(ex.clone(), task.task_id, stored, &mut insert_rng)?;
            }
        }
        Ok(())
    }

    /// iCaRL memory update: shrink old exemplar sets, herd new ones, refresh
    /// the class means under the current model.
    fn rebuild_exemplars(&mut self, task: &Task, data: &[Example]) -> Result<()> {
        let per_class = self.buffer.capacity() / self.seen_classes.len().max(1);
        let mut kept: Vec<BufferEntry> = Vec::new();
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for e in self.buffer.entries() {
            let n = counts.entry(e.example.label).or_default();
            if *n < per_class {
                kept.push(e.clone());
                *n += 1;
            }
        }
        let base = self.buffer.seen_count();
        let mut fresh_means = BTreeMap::new();
        for &c in &task.classes {
            let members: Vec<Example> = data.iter().filter(|e| e.label == c).cloned().collect();
            if members.is_empty() {
                continue;
            }
            if per_class == 0 {
                fresh_means.insert(c, mean_rows(&self.model.embed(&members)?));
                continue;
            }
            for idx in icarl_build_exemplars(&self.model, &members, per_class)? {
                kept.push(BufferEntry {
                    example: members[idx].clone(),
                    task_id: task.task_id,
                    stored_logits: None,
                    insertion_index: base + kept.len(),
                });
            }
        }
        self.buffer.replace_entries(kept, data.len())?;

        let mut by_class: BTreeMap<usize, Vec<Example>> = BTreeMap::new();
        for e in self.buffer.eligible() {
            by_class.entry(e.example.label).or_default().push(e.example.clone());
        }
        let mut means = BTreeMap::new();
        for (c, members) in by_class {
            means.insert(c, mean_rows(&self.model.embed(&members)?));
        }
        if let MethodAux::Icarl(st) = &mut self.aux {
            for c in &self.seen_classes {
                if let Some(m) = means.remove(c).or_else(|| fresh_means.remove(c)) {
                    st.class_means.insert(*c, m);
                }
            }
        }
        Ok(())
    }

    /// Predicted class for every example; `candidates` restricts the choice
    /// (task-IL). Without candidates, logit methods choose among all outputs
    /// and iCaRL among the classes it has seen.
    pub fn predict(&self, batch: &[Example], candidates: Option<&[usize]>) -> Result<Vec<usize>> {
        if let MethodAux::Icarl(_) = self.aux {
            return batch
                .iter()
                .map(|ex| icarl_nme_predict(self, &ex.features, candidates))
                .collect();
        }
        let logits = self.model.forward(batch)?;
        let all: Vec<usize>;
        let cands = match candidates {
            Some(c) => c,
            None => {
                all = (0..logits.cols).collect();
                &all
            }
        };
        ensure!(!cands.is_empty(), Argument, "empty candidate set");
        (0..logits.rows)
            .map(|i| {
                let row = logits.row(i);
                let mut best = cands[0];
                for &c in cands {
                    ensure!(c < row.len(), Argument, "candidate class {c} out of range");
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                Ok(best)
            })
            .collect()
    }
}

impl Learner for TrainerState {
    fn train_task(
        &mut self,
        task: &Task,
        data: &[Example],
        hp: &HyperparamConfig,
        seed: u64,
        phase: Phase,
        ledger: &mut CostLedger,
    ) -> Result<()> {
        TrainerState::train_task(self, task, data, hp, seed, phase, ledger)
    }

    fn predict(&self, batch: &[Example], candidates: Option<&[usize]>) -> Result<Vec<usize>> {
        TrainerState::predict(self, batch, candidates)
    }

    fn hold_out_memory(&mut self, task_id: usize, fraction: f64, seed: u64) -> Result<Vec<Example>> {
        let ids = self
            .buffer
            .holdout_proportional(fraction, &mut seed::rng(seed))?;
        if let Some(trace) = &self.trace {
            trace.record_holdout(task_id, &ids);
        }
        Ok(self
            .buffer
            .entries()
            .iter()
            .filter(|e| ids.contains(&e.example.id))
            .map(|e| e.example.clone())
            .collect())
    }

    fn release_memory_holdout(&mut self) {
        self.buffer.release_holdout();
    }
}

/// Shuffled mini-batch indices for `epochs` passes over `n` examples.
pub fn batch_schedule(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut out = Vec::with_capacity(epochs * n.div_ceil(batch_size.max(1)));
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        out.extend(order.chunks(batch_size.max(1)).map(<[usize]>::to_vec));
    }
    out
}

fn add_term(total: &mut (f64, GradientSet), term: (f64, GradientSet), weight: f64) {
    total.0 += weight * term.0;
    total.1.add_scaled(&term.1, weight);
}

/// ER: cross-entropy over the current batch with the replay batch appended.
pub fn batch_loss_er(
    state: &TrainerState,
    current: &[Example],
    replay: &[Example],
) -> Result<(f64, GradientSet)> {
    let joined: Vec<Example> = current.iter().chain(replay).cloned().collect();
    loss_and_grad(&state.model, &joined, None)
}

/// ER-ACE: current batch restricted to the current task's classes, replay
/// batch over every class seen so far, losses summed.
pub fn batch_loss_er_ace(
    state: &TrainerState,
    current: &[Example],
    replay: &[Example],
    current_classes: &[usize],
) -> Result<(f64, GradientSet)> {
    let mut total = loss_and_grad(&state.model, current, Some(current_classes))?;
    if !replay.is_empty() {
        let seen: Vec<usize> = state
            .seen_classes
            .iter()
            .chain(current_classes)
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        add_term(
            &mut total,
            loss_and_grad(&state.model, replay, Some(&seen))?,
            1.0,
        );
    }
    Ok(total)
}

/// DER++: `CE(current) + alpha * MSE(logits(replay_1), stored) + beta * CE(replay_2)`.
/// Terms with a zero coefficient or an empty batch are skipped.
pub fn batch_loss_derpp(
    state: &TrainerState,
    current: &[Example],
    replay_logits: &[BufferEntry],
    replay_labels: &[Example],
    hp: &HyperparamConfig,
) -> Result<(f64, GradientSet)> {
    let alpha = hp.alpha.unwrap_or(0.0);
    let beta = hp.beta.unwrap_or(0.0);
    let mut total = loss_and_grad(&state.model, current, None)?;
    if alpha != 0.0 && !replay_logits.is_empty() {
        let rows = replay_logits
            .iter()
            .map(|e| {
                e.stored_logits.clone().ok_or_else(|| {
                    Error::State(format!(
                        "buffer entry {} has no stored logits",
                        e.example.id
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let inputs: Vec<Example> = replay_logits.iter().map(|e| e.example.clone()).collect();
        let targets = Matrix::from_rows(&rows)?;
        add_term(
            &mut total,
            mse_logit_loss_and_grad(&state.model, &inputs, &targets)?,
            alpha,
        );
    }
    if beta != 0.0 && !replay_labels.is_empty() {
        add_term(
            &mut total,
            loss_and_grad(&state.model, replay_labels, None)?,
            beta,
        );
    }
    Ok(total)
}

/// iCaRL (simplified): `CE(current)` plus cross-entropy between the live
/// model and the pre-task model's probabilities on replayed inputs, both
/// restricted to classes seen before the current task.
pub fn batch_loss_icarl(
    state: &TrainerState,
    current: &[Example],
    replay: &[Example],
) -> Result<(f64, GradientSet)> {
    let mut total = loss_and_grad(&state.model, current, None)?;
    let previous = match &state.aux {
        MethodAux::Icarl(IcarlState {
            previous: Some(p), ..
        }) => p,
        _ => return Ok(total),
    };
    if replay.is_empty() || state.seen_classes.is_empty() {
        return Ok(total);
    }
    let old: Vec<usize> = state.seen_classes.iter().copied().collect();
    let mut allowed = vec![false; state.n_classes()];
    for &c in &old {
        allowed[c] = true;
    }
    let logits = previous.forward(replay)?;
    let mut targets = Matrix::zeros(logits.rows, logits.cols);
    for i in 0..logits.rows {
        let row = logits.row(i);
        let max = old.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = old.iter().map(|&c| (row[c] - max).exp()).sum();
        for &c in &old {
            targets.row_mut(i)[c] = (row[c] - max).exp() / norm;
        }
    }
    add_term(
        &mut total,
        soft_target_loss_and_grad(&state.model, replay, &targets, Some(&old))?,
        1.0,
    );
    Ok(total)
}

/// Greedy herding in embedding space: repeatedly add the example that keeps
/// the exemplar mean closest to the class mean. Returns indices into
/// `examples` in selection order; ties go to the lower index.
pub fn icarl_build_exemplars(model: &MlpModel, examples: &[Example], m: usize) -> Result<Vec<usize>> {
    ensure!(m >= 1, Argument, "exemplar count must be >= 1");
    ensure!(!examples.is_empty(), Argument, "class has no training data");
    let feats = model.embed(examples)?;
    let target = mean_rows(&feats);
    let mut running = vec![0.0; feats.cols];
    let mut chosen = Vec::new();
    let mut taken = vec![false; feats.rows];
    for k in 1..=m.min(feats.rows) {
        let mut best: Option<(usize, f64)> = None;
        for i in (0..feats.rows).filter(|&i| !taken[i]) {
            let dist: f64 = running
                .iter()
                .zip(feats.row(i))
                .zip(&target)
                .map(|((s, f), t)| {
                    let d = t - (s + f) / k as f64;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("unchosen examples remain");
        taken[i] = true;
        chosen.push(i);
        for (s, f) in running.iter_mut().zip(feats.row(i)) {
            *s += f;
        }
    }
    Ok(chosen)
}

/// Nearest mean of exemplars. Every candidate must have a stored mean.
pub fn icarl_nme_predict(
    state: &TrainerState,
    features: &[f64],
    candidates: Option<&[usize]>,
) -> Result<usize> {
    let means = match &state.aux {
        MethodAux::Icarl(st) => &st.class_means,
        _ => return Err(Error::State("NME prediction needs an iCaRL trainer".into())),
    };
    let probe = Example {
        id: usize::MAX,
        features: features.to_vec(),
        label: 0,
    };
    let emb = state.model.embed(std::slice::from_ref(&probe))?;
    let emb = emb.row(0);
    let pool: Vec<usize> = match candidates {
        Some(c) => c.to_vec(),
        None => means.keys().copied().collect(),
    };
    ensure!(!pool.is_empty(), State, "no class means available for prediction");
    let mut best: Option<(usize, f64)> = None;
    for c in pool {
        let mean = means
            .get(&c)
            .ok_or_else(|| Error::State(format!("class {c} has not been seen")))?;
        let dist: f64 = emb.iter().zip(mean).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, d)| dist < d) {
            best = Some((c, dist));
        }
    }
    Ok(best.expect("pool is nonempty").0)
}

fn mean_rows(m: &Matrix) -> Vec<f64> {
    let mut mean = vec![0.0; m.cols];
    for i in 0..m.rows {
        for (acc, v) in mean.iter_mut().zip(m.row(i)) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v /= m.rows.max(1) as f64;
    }
    mean
}

/// One ESMER step before the optimiser update.
#[derive(Debug, Clone)]
pub struct EsmerStep {
    pub loss: f64,
    pub grads: GradientSet,
    /// Gating weight applied to each current example.
    pub weights: Vec<f64>,
    /// Mean of the gated per-example losses; feeds the running loss mean.
    pub batch_mean_loss: f64,
}

/// ESMER (simplified). Current examples with loss above `margin * mu` get
/// weight `mu * margin / loss`, which caps their contribution at the margin.
/// Replayed inputs are pulled toward the stable model's logits.
pub fn batch_loss_esmer(
    state: &TrainerState,
    current: &[Example],
    replay: &[Example],
    hp: &HyperparamConfig,
) -> Result<EsmerStep> {
    let (stable, loss_mean) = match &state.aux {
        MethodAux::Esmer(st) => (&st.stable, st.loss_mean),
        _ => return Err(Error::State("ESMER loss needs an ESMER trainer".into())),
    };
    let margin = hp
        .loss_margin
        .ok_or_else(|| Error::Argument("ESMER needs a loss margin".into()))?;
    let trace = state.model.trace(&state.model.inputs(current)?)?;
    let labels: Vec<usize> = current.iter().map(|e| e.label).collect();
    let plain = softmax_cross_entropy(trace.logits(), &labels, None, None)?;
    let weights: Vec<f64> = plain
        .per_example
        .iter()
        .map(|&l| match loss_mean {
            Some(mu) if l > margin * mu => mu * margin / l,
            _ => 1.0,
        })
        .collect();
    let gated = softmax_cross_entropy(trace.logits(), &labels, None, Some(&weights))?;
    let mut total = (gated.loss, state.model.backward(&trace, &gated.dlogits));
    if !replay.is_empty() {
        let targets = stable.forward(replay)?;
        add_term(
            &mut total,
            mse_logit_loss_and_grad(&state.model, replay, &targets)?,
            ESMER_DISTILL_WEIGHT,
        );
    }
    let n = plain.per_example.len().max(1) as f64;
    let batch_mean_loss = plain
        .per_example
        .iter()
        .zip(&weights)
        .map(|(l, w)| l * w)
        .sum::<f64>()
        / n;
    Ok(EsmerStep {
        loss: total.0,
        grads: total.1,
        weights,
        batch_mean_loss,
    })
}
