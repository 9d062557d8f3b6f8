//! Class-IL / task-IL evaluation and result files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::hpo::{HyperparamConfig, Learner, RunRecord};
use crate::streamgen::TaskStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Predict among every class.
    ClassIl,
    /// Predict among the classes of the example's own task.
    TaskIl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_task_class_il: Vec<f64>,
    pub per_task_task_il: Vec<f64>,
    pub average_accuracy_class_il: f64,
    pub average_accuracy_task_il: f64,
    /// Class-IL test accuracy per class.
    pub per_class_accuracy: BTreeMap<usize, f64>,
}

/// Test accuracy of each task under `mode`.
pub fn evaluate<L: Learner>(learner: &L, stream: &TaskStream, mode: EvalMode) -> Result<Vec<f64>> {
    stream
        .tasks
        .iter()
        .map(|task| {
            ensure!(
                !task.test.is_empty(),
                Argument,
                "task {} has no test data",
                task.task_id
            );
            let candidates = match mode {
                EvalMode::ClassIl => None,
                EvalMode::TaskIl => Some(task.classes.as_slice()),
            };
            let preds = learner.predict(&task.test, candidates)?;
            let correct = preds
                .iter()
                .zip(&task.test)
                .filter(|(p, e)| **p == e.label)
                .count();
            Ok(correct as f64 / task.test.len() as f64)
        })
        .collect()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

impl EvalReport {
    pub fn compute<L: Learner>(learner: &L, stream: &TaskStream) -> Result<Self> {
        let class_il = evaluate(learner, stream, EvalMode::ClassIl)?;
        let task_il = evaluate(learner, stream, EvalMode::TaskIl)?;

        let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for task in &stream.tasks {
            let preds = learner.predict(&task.test, None)?;
            for (p, e) in preds.iter().zip(&task.test) {
                let h = hits.entry(e.label).or_default();
                h.1 += 1;
                if *p == e.label {
                    h.0 += 1;
                }
            }
        }
        let per_class_accuracy = hits
            .into_iter()
            .map(|(c, (ok, n))| (c, ok as f64 / n as f64))
            .collect();
        Ok(EvalReport {
            average_accuracy_class_il: mean(&class_il),
            average_accuracy_task_il: mean(&task_il),
            per_task_class_il: class_il,
            per_task_task_il: task_il,
            per_class_accuracy,
        })
    }
}

/// Median over classes of per-class accuracy. `predictions` holds
/// `(true class, predicted class)` pairs. Even class counts average the two
/// middle values.
pub fn median_per_class_accuracy(predictions: &[(usize, usize)]) -> Result<f64> {
    ensure!(!predictions.is_empty(), Argument, "no predictions to score");
    let mut hits: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &(truth, pred) in predictions {
        let h = hits.entry(truth).or_default();
        h.1 += 1;
        if truth == pred {
            h.0 += 1;
        }
    }
    let mut accs: Vec<f64> = hits
        .values()
        .map(|&(ok, n)| ok as f64 / n as f64)
        .collect();
    accs.sort_by(f64::total_cmp);
    let n = accs.len();
    Ok(if n % 2 == 1 {
        accs[n / 2]
    } else {
        (accs[n / 2 - 1] + accs[n / 2]) / 2.0
    })
}

/// Column order of histogram files.
pub const HISTOGRAM_COLUMNS: [&str; 6] = ["config_id", "lr", "alpha", "beta", "loss_margin", "val_accuracy"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row per configuration, `config_id` being the position in `trials`.
pub fn emit_histogram(trials: &[(HyperparamConfig, f64)], path: impl AsRef<Path>) -> Result<()> {
    ensure!(!trials.is_empty(), Argument, "no trial scores to write");
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(HISTOGRAM_COLUMNS)?;
    for (i, (hp, score)) in trials.iter().enumerate() {
        out.write_record([
            i.to_string(),
            hp.lr.to_string(),
            opt(hp.alpha),
            opt(hp.beta),
            opt(hp.loss_margin),
            score.to_string(),
        ])?;
    }
    let bytes = out
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv buffer: {e}")))?;
    write_atomic(path.as_ref(), &bytes)
}

pub fn read_histogram(path: impl AsRef<Path>) -> Result<Vec<(HyperparamConfig, f64)>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    ensure!(
        reader.headers()?.iter().eq(HISTOGRAM_COLUMNS),
        Parse,
        "{} does not have the histogram columns",
        path.display()
    );
    let num = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Parse(format!("bad number '{s}' in {}", path.display())))
    };
    let maybe = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            num(s).map(Some)
        }
    };
    let mut rows = Vec::new();
    for record in reader.records() {
        let r = record?;
        let hp = HyperparamConfig {
            lr: num(&r[1])?,
            alpha: maybe(&r[2])?,
            beta: maybe(&r[3])?,
            loss_margin: maybe(&r[4])?,
        };
        rows.push((hp, num(&r[5])?));
    }
    Ok(rows)
}

/// Write through a sibling temp file and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn persist_run(record: &RunRecord, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(record)?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn load_run(path: impl AsRef<Path>) -> Result<RunRecord> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let record: RunRecord = serde_json::from_str(&text)?;
    ensure!(
        record.schema == RunRecord::SCHEMA,
        Parse,
        "{} has schema '{}', expected '{}'",
        path.display(),
        record.schema,
        RunRecord::SCHEMA
    );
    Ok(record)
}
