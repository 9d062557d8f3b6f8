//! Task-stream construction.
//!
//! A [`Dataset`] is partitioned into an ordered [`TaskStream`] whose tasks own
//! pairwise-disjoint class sets. Each task carries a class-balanced test
//! holdout; train/validation partitions are drawn afterwards with
//! [`split_train_val`] or [`TaskStream::with_val_split`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::seed::{self, tag};

/// Fraction of every class held out for testing before train/val splitting.
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;

/// Fraction of a task's non-test data moved to validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.1;

/// One labelled instance. `id` is unique within its dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub dim: usize,
    pub n_classes: usize,
    /// Original label spelling for each dense class id.
    pub class_names: Vec<String>,
}

impl Dataset {
    fn by_class(&self) -> BTreeMap<usize, Vec<&Example>> {
        let mut map: BTreeMap<usize, Vec<&Example>> = BTreeMap::new();
        for ex in &self.examples {
            map.entry(ex.label).or_default().push(ex);
        }
        map
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    /// Sorted class ids owned by this task.
    pub classes: Vec<usize>,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
    pub test: Vec<Example>,
}

impl Task {
    /// Training data followed by validation data, used by retrain phases.
    pub fn train_and_val(&self) -> Vec<Example> {
        self.train.iter().chain(&self.val).cloned().collect()
    }

    pub fn owns(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    /// Sorted ids of every class used by some task.
    pub class_universe: Vec<usize>,
    /// Output width of any model trained on the stream.
    pub n_classes: usize,
    pub dim: usize,
    /// The seed-determined class permutation the tasks were cut from.
    pub class_order: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Re-split every task into train/val with `val_fraction`.
    pub fn with_val_split(&self, val_fraction: f64, seed: u64) -> Result<TaskStream> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                split_train_val(
                    t,
                    val_fraction,
                    seed::derive(seed, &[tag::VAL_SPLIT, t.task_id as u64]),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskStream {
            tasks,
            ..self.clone()
        })
    }

    /// Check class-set disjointness and label membership.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for task in &self.tasks {
            for &c in &task.classes {
                ensure!(
                    seen.insert(c),
                    Stream,
                    "class {c} appears in more than one task"
                );
            }
            for ex in task.train.iter().chain(&task.val).chain(&task.test) {
                ensure!(
                    task.owns(ex.label),
                    Stream,
                    "example {} with label {} lies outside task {}",
                    ex.id,
                    ex.label,
                    task.task_id
                );
            }
        }
        let universe: BTreeSet<usize> = self.class_universe.iter().copied().collect();
        ensure!(
            seen == universe,
            Stream,
            "task class sets do not cover the class universe"
        );
        Ok(())
    }
}

/// `ceil(fraction * n)`, tolerant of representation error in the product.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let k = (raw - 1e-9).ceil();
    if k <= 0.0 {
        0
    } else {
        (k as usize).min(n)
    }
}

/// Load a headered CSV file. Every non-label column is a numeric feature.
///
/// Labels that all parse as integers are mapped to dense ids in ascending
/// numeric order; otherwise labels are mapped in order of first appearance.
pub fn ingest_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let headers = reader.headers()?.clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Parse(format!("no column named '{label_column}'")))?;
    let feature_names: Vec<&str> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h)
        .collect();
    let dim = feature_names.len();
    ensure!(dim >= 1, Parse, "file has no feature columns");

    let mut rows = Vec::new();
    let mut raw_labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Parse(format!(
                "row {row}: expected {dim} features, found {}",
                record.len().saturating_sub(1)
            )));
        }
        let mut features = Vec::with_capacity(dim);
        let mut f = 0;
        for (col, cell) in record.iter().enumerate() {
            if col == label_idx {
                continue;
            }
            let value: f64 = cell.parse().map_err(|_| {
                Error::Parse(format!(
                    "row {row}, column '{}': non-numeric value '{cell}'",
                    feature_names[f]
                ))
            })?;
            features.push(value);
            f += 1;
        }
        rows.push(features);
        raw_labels.push(record[label_idx].to_string());
    }
    ensure!(!rows.is_empty(), Parse, "file has no data rows");

    let (class_names, labels) = label_vocabulary(&raw_labels);
    let examples = rows
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(id, (features, label))| Example {
            id,
            features,
            label,
        })
        .collect();
    Ok(Dataset {
        examples,
        dim,
        n_classes: class_names.len(),
        class_names,
    })
}

/// Dense class ids for raw label strings, plus the name of each id.
fn label_vocabulary(raw: &[String]) -> (Vec<String>, Vec<usize>) {
    let numeric: Option<Vec<i64>> = raw.iter().map(|l| l.parse::<i64>().ok()).collect();
    match numeric {
        Some(values) => {
            let unique: Vec<i64> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
            let labels = values
                .iter()
                .map(|v| unique.binary_search(v).expect("value drawn from the same set"))
                .collect();
            (unique.iter().map(i64::to_string).collect(), labels)
        }
        None => {
            let mut ids: HashMap<&str, usize> = HashMap::new();
            let mut names = Vec::new();
            let labels = raw
                .iter()
                .map(|l| {
                    *ids.entry(l.as_str()).or_insert_with(|| {
                        names.push(l.clone());
                        names.len() - 1
                    })
                })
                .collect();
            (names, labels)
        }
    }
}

/// Isotropic unit-variance Gaussian blobs, one per class.
///
/// Centres are drawn by rejection sampling inside a cube that grows until
/// every pair of centres is at least `separation` apart.
pub fn synth_gaussian(
    n_classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    ensure!(n_classes >= 2, Argument, "n_classes must be >= 2, got {n_classes}");
    ensure!(dim >= 1, Argument, "dim must be >= 1, got {dim}");
    ensure!(n_per_class >= 1, Argument, "n_per_class must be >= 1");
    ensure!(
        separation.is_finite() && separation > 0.0,
        Argument,
        "separation must be positive, got {separation}"
    );

    let mut rng = seed::rng(seed);
    let mut half_width = separation * (n_classes as f64).powf(1.0 / dim as f64);
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    while centres.len() < n_classes {
        let mut placed = false;
        for _ in 0..1000 {
            let candidate: Vec<f64> = (0..dim)
                .map(|_| rng.gen_range(-half_width..=half_width))
                .collect();
            if centres
                .iter()
                .all(|c| euclidean(c, &candidate) >= separation)
            {
                centres.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            half_width *= 1.5;
        }
    }

    let mut examples = Vec::with_capacity(n_classes * n_per_class);
    for (label, centre) in centres.iter().enumerate() {
        for _ in 0..n_per_class {
            let features = centre
                .iter()
                .map(|&m| m + rng.sample::<f64, _>(StandardNormal))
                .collect();
            examples.push(Example {
                id: examples.len(),
                features,
                label,
            });
        }
    }
    Ok(Dataset {
        examples,
        dim,
        n_classes,
        class_names: (0..n_classes).map(|c| c.to_string()).collect(),
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Split-task stream: `n_tasks` tasks with equally many classes each.
pub fn build_split_stream(dataset: &Dataset, n_tasks: usize, seed: u64) -> Result<TaskStream> {
    build_split_stream_with(dataset, n_tasks, seed, DEFAULT_TEST_FRACTION)
}

pub fn build_split_stream_with(
    dataset: &Dataset,
    n_tasks: usize,
    seed: u64,
    test_fraction: f64,
) -> Result<TaskStream> {
    ensure!(n_tasks >= 1, Argument, "n_tasks must be >= 1");
    ensure!(
        dataset.n_classes.is_multiple_of(n_tasks),
        Argument,
        "{} classes cannot be split evenly into {n_tasks} tasks; use build_hetero_stream \
         for uneven class counts",
        dataset.n_classes
    );
    let per_task = dataset.n_classes / n_tasks;
    build_stream(dataset, &vec![per_task; n_tasks], seed, test_fraction)
}

/// Heterogeneous stream: task `i` receives `class_counts[i]` classes.
pub fn build_hetero_stream(
    dataset: &Dataset,
    class_counts: &[usize],
    seed: u64,
) -> Result<TaskStream> {
    build_hetero_stream_with(dataset, class_counts, seed, DEFAULT_TEST_FRACTION)
}

pub fn build_hetero_stream_with(
    dataset: &Dataset,
    class_counts: &[usize],
    seed: u64,
    test_fraction: f64,
) -> Result<TaskStream> {
    ensure!(!class_counts.is_empty(), Argument, "class_counts is empty");
    ensure!(
        class_counts.iter().all(|&c| c >= 1),
        Argument,
        "every task needs at least one class"
    );
    let total: usize = class_counts.iter().sum();
    ensure!(
        total <= dataset.n_classes,
        Argument,
        "class counts sum to {total} but the dataset has only {} classes",
        dataset.n_classes
    );
    if total < dataset.n_classes {
        log::info!(
            "heterogeneous stream uses {total} of {} classes; the rest are dropped",
            dataset.n_classes
        );
    }
    build_stream(dataset, class_counts, seed, test_fraction)
}

fn build_stream(
    dataset: &Dataset,
    class_counts: &[usize],
    seed: u64,
    test_fraction: f64,
) -> Result<TaskStream> {
    ensure!(
        (0.0..1.0).contains(&test_fraction),
        Argument,
        "test_fraction must lie in [0, 1), got {test_fraction}"
    );
    let mut class_order: Vec<usize> = (0..dataset.n_classes).collect();
    class_order.shuffle(&mut seed::rng(seed::derive(seed, &[tag::CLASS_ORDER])));

    let by_class = dataset.by_class();
    let mut tasks = Vec::with_capacity(class_counts.len());
    let mut cursor = 0;
    for (task_id, &count) in class_counts.iter().enumerate() {
        let mut classes = class_order[cursor..cursor + count].to_vec();
        classes.sort_unstable();
        cursor += count;

        let mut rng = seed::rng(seed::derive(seed, &[tag::TEST_SPLIT, task_id as u64]));
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in &classes {
            let members = by_class.get(&c).map(Vec::as_slice).unwrap_or_default();
            let n_test = ceil_count(test_fraction, members.len());
            let mut order: Vec<usize> = (0..members.len()).collect();
            order.shuffle(&mut rng);
            let held: BTreeSet<usize> = order[..n_test].iter().copied().collect();
            for (i, ex) in members.iter().enumerate() {
                if held.contains(&i) {
                    test.push((*ex).clone());
                } else {
                    train.push((*ex).clone());
                }
            }
        }
        tasks.push(Task {
            task_id,
            classes,
            train,
            val: Vec::new(),
            test,
        });
    }

    let mut class_universe: Vec<usize> = class_order[..cursor].to_vec();
    class_universe.sort_unstable();
    let stream = TaskStream {
        tasks,
        class_universe,
        n_classes: dataset.n_classes,
        dim: dataset.dim,
        class_order,
    };
    stream.validate()?;
    Ok(stream)
}

/// Class-balanced train/validation split of a task's non-test data.
///
/// For each class, `ceil(val_fraction * n_c)` examples move to validation.
pub fn split_train_val(task: &Task, val_fraction: f64, seed: u64) -> Result<Task> {
    ensure!(
        val_fraction > 0.0 && val_fraction < 1.0,
        Argument,
        "val_fraction must lie in (0, 1), got {val_fraction}"
    );
    let pool: Vec<&Example> = task.train.iter().chain(&task.val).collect();
    let mut rng = seed::rng(seed);
    let mut to_val = BTreeSet::new();
    for &c in &task.classes {
        let members: Vec<usize> = pool
            .iter()
            .enumerate()
            .filter(|(_, ex)| ex.label == c)
            .map(|(i, _)| i)
            .collect();
        ensure!(
            members.len() >= 2,
            Argument,
            "class {c} in task {} has {} non-test examples; at least 2 are needed",
            task.task_id,
            members.len()
        );
        let k = ceil_count(val_fraction, members.len());
        to_val.extend(members.choose_multiple(&mut rng, k).copied());
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, ex) in pool.into_iter().enumerate() {
        if to_val.contains(&i) {
            val.push(ex.clone());
        } else {
            train.push(ex.clone());
        }
    }
    Ok(Task {
        task_id: task.task_id,
        classes: task.classes.clone(),
        train,
        val,
        test: task.test.clone(),
    })
}
