//! Config-driven experiment plans: parse, execute, report.
//!
//! A plan expands to one run per `(method, framework, seed)`. Each run writes
//! `runs/<method>__<framework>__seed<seed>.json` and one histogram CSV per
//! selection phase under `histograms/`. `index.json` lists every run with its
//! status; a failing run is recorded there and the others continue.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clmethods::{MethodKind, TrainConfig, TrainTrace, TrainerState};
use crate::error::{ensure, Error, Result};
use crate::evalreport::{emit_histogram, load_run, mean, persist_run, write_atomic, EvalReport};
use crate::hpo::{make_grid, run_framework, Framework, RunOptions, RunRecord, SelectionPhase};
use crate::seed::{self, tag};
use crate::streamgen::{
    build_hetero_stream_with, build_split_stream_with, ingest_csv, synth_gaussian, Dataset,
    TaskStream, DEFAULT_TEST_FRACTION, DEFAULT_VAL_FRACTION,
};

pub const CONFIG_SCHEMA: &str = "clhpo-config-v1";
pub const INDEX_SCHEMA: &str = "clhpo-index-v1";

/// Accuracy margin a framework must beat every other by to be flagged.
pub const BOLD_MARGIN: f64 = 0.005;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    schema: String,
    methods: Vec<MethodKind>,
    frameworks: Vec<Framework>,
    seeds: Vec<u64>,
    #[serde(default)]
    output: Option<PathBuf>,
    stream: RawStream,
    #[serde(default)]
    training: RawTraining,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
enum SourceKind {
    Synthetic,
    Csv,
}

#[derive(Debug, Deserialize, Clone, Copy, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
enum LayoutKind {
    #[default]
    Split,
    Hetero,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStream {
    source: SourceKind,
    n_classes: Option<usize>,
    dim: Option<usize>,
    n_per_class: Option<usize>,
    separation: Option<f64>,
    data_seed: Option<u64>,
    path: Option<PathBuf>,
    label_column: Option<String>,
    #[serde(default)]
    layout: LayoutKind,
    n_tasks: Option<usize>,
    class_counts: Option<Vec<usize>>,
    test_fraction: Option<f64>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    buffer_capacity: Option<usize>,
    val_fraction: Option<f64>,
    holdout_fraction: Option<f64>,
    hidden: Option<Vec<usize>>,
    ema_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic {
        n_classes: usize,
        dim: usize,
        n_per_class: usize,
        separation: f64,
        data_seed: u64,
    },
    Csv {
        path: PathBuf,
        label_column: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamLayout {
    Split { n_tasks: usize },
    Hetero { class_counts: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamSpec {
    pub source: DataSource,
    pub layout: StreamLayout,
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingParams {
    pub train: TrainConfig,
    pub val_fraction: f64,
    pub holdout_fraction: f64,
}

impl Default for TrainingParams {
    fn default() -> Self {
        TrainingParams {
            train: TrainConfig::default(),
            val_fraction: DEFAULT_VAL_FRACTION,
            holdout_fraction: crate::hpo::DEFAULT_HOLDOUT_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentPlan {
    pub stream: StreamSpec,
    pub methods: Vec<MethodKind>,
    pub frameworks: Vec<Framework>,
    pub seeds: Vec<u64>,
    pub training: TrainingParams,
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSpec {
    pub method: MethodKind,
    pub framework: Framework,
    pub seed: u64,
}

impl RunSpec {
    pub fn stem(&self) -> String {
        format!("{}__{}__seed{}", self.method, self.framework, self.seed)
    }
}

impl ExperimentPlan {
    /// Every `(method, framework, seed)` triple, methods outermost.
    pub fn runs(&self) -> Vec<RunSpec> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &framework in &self.frameworks {
                for &seed in &self.seeds {
                    out.push(RunSpec {
                        method,
                        framework,
                        seed,
                    });
                }
            }
        }
        out
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.stream.source {
            DataSource::Synthetic {
                n_classes,
                dim,
                n_per_class,
                separation,
                data_seed,
            } => synth_gaussian(*n_classes, *dim, *n_per_class, *separation, *data_seed),
            DataSource::Csv { path, label_column } => ingest_csv(path, label_column),
        }
    }

    /// The train/val/test stream used by runs with `seed`.
    pub fn build_stream(&self, dataset: &Dataset, seed: u64) -> Result<TaskStream> {
        let stream = match &self.stream.layout {
            StreamLayout::Split { n_tasks } => {
                build_split_stream_with(dataset, *n_tasks, seed, self.stream.test_fraction)?
            }
            StreamLayout::Hetero { class_counts } => {
                build_hetero_stream_with(dataset, class_counts, seed, self.stream.test_fraction)?
            }
        };
        stream.with_val_split(self.training.val_fraction, seed)
    }
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required key 'stream.{key}'")))
}

/// Parse and validate a `clhpo-config-v1` TOML file. Relative CSV paths are
/// resolved against the config file's directory.
pub fn parse_config(path: impl AsRef<Path>) -> Result<ExperimentPlan> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config_str(&text, base)
}

pub fn parse_config_str(text: &str, base_dir: &Path) -> Result<ExperimentPlan> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    ensure!(
        raw.schema == CONFIG_SCHEMA,
        Config,
        "schema must be '{CONFIG_SCHEMA}', found '{}'",
        raw.schema
    );
    ensure!(!raw.methods.is_empty(), Config, "'methods' is empty");
    ensure!(!raw.frameworks.is_empty(), Config, "'frameworks' is empty");
    ensure!(!raw.seeds.is_empty(), Config, "'seeds' is empty");

    let s = raw.stream;
    let source = match s.source {
        SourceKind::Synthetic => DataSource::Synthetic {
            n_classes: required(s.n_classes, "n_classes")?,
            dim: required(s.dim, "dim")?,
            n_per_class: required(s.n_per_class, "n_per_class")?,
            separation: required(s.separation, "separation")?,
            data_seed: s.data_seed.unwrap_or(0),
        },
        SourceKind::Csv => {
            let p = required(s.path, "path")?;
            let p = if p.is_relative() { base_dir.join(p) } else { p };
            ensure!(p.is_file(), Config, "data file {} does not exist", p.display());
            DataSource::Csv {
                path: p,
                label_column: s.label_column.unwrap_or_else(|| "label".to_string()),
            }
        }
    };
    let layout = match s.layout {
        LayoutKind::Split => StreamLayout::Split {
            n_tasks: required(s.n_tasks, "n_tasks")?,
        },
        LayoutKind::Hetero => StreamLayout::Hetero {
            class_counts: required(s.class_counts, "class_counts")?,
        },
    };
    let test_fraction = s.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
    ensure!(
        test_fraction > 0.0 && test_fraction < 1.0,
        Config,
        "stream.test_fraction must lie in (0, 1)"
    );

    let t = raw.training;
    let defaults = TrainingParams::default();
    let training = TrainingParams {
        train: TrainConfig {
            epochs: t.epochs.unwrap_or(defaults.train.epochs),
            batch_size: t.batch_size.unwrap_or(defaults.train.batch_size),
            buffer_capacity: t.buffer_capacity.unwrap_or(defaults.train.buffer_capacity),
            hidden: t.hidden.unwrap_or(defaults.train.hidden),
            ema_decay: t.ema_decay.unwrap_or(defaults.train.ema_decay),
        },
        val_fraction: t.val_fraction.unwrap_or(defaults.val_fraction),
        holdout_fraction: t.holdout_fraction.unwrap_or(defaults.holdout_fraction),
    };
    ensure!(training.train.epochs >= 1, Config, "training.epochs must be >= 1");
    ensure!(training.train.batch_size >= 1, Config, "training.batch_size must be >= 1");
    ensure!(
        training.train.hidden.iter().all(|&h| h > 0),
        Config,
        "training.hidden widths must be positive"
    );
    for (key, v) in [
        ("val_fraction", training.val_fraction),
        ("holdout_fraction", training.holdout_fraction),
        ("ema_decay", training.train.ema_decay),
    ] {
        ensure!(v > 0.0 && v < 1.0, Config, "training.{key} must lie in (0, 1), got {v}");
    }

    Ok(ExperimentPlan {
        stream: StreamSpec {
            source,
            layout,
            test_fraction,
        },
        methods: raw.methods,
        frameworks: raw.frameworks,
        seeds: raw.seeds,
        training,
        output: raw.output.unwrap_or_else(|| PathBuf::from("results")),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ExecOptions {
    /// Run plan entries and trials on the rayon pool.
    pub parallel: bool,
    /// Also write the final replay buffer of each run as CSV.
    pub dump_buffer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub method: MethodKind,
    pub framework: Framework,
    pub seed: u64,
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_file: Option<String>,
    #[serde(default)]
    pub histograms: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunIndex {
    pub schema: String,
    pub runs: Vec<IndexEntry>,
}

impl RunIndex {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.status != "ok").count()
    }
}

/// Outputs of one successful run, in memory.
pub struct RunArtifacts {
    pub record: RunRecord,
    pub selections: Vec<SelectionPhase>,
    pub learner: TrainerState,
}

/// Build the stream for `spec.seed` and run one framework end to end.
pub fn run_one(
    plan: &ExperimentPlan,
    dataset: &Dataset,
    spec: RunSpec,
    parallel: bool,
    trace: Option<Arc<TrainTrace>>,
) -> Result<RunArtifacts> {
    let stream = plan.build_stream(dataset, spec.seed)?;
    let mut init = TrainerState::new(
        spec.method,
        stream.dim,
        stream.n_classes,
        plan.training.train.clone(),
        seed::derive(spec.seed, &[tag::INIT]),
    )?;
    if let Some(t) = trace {
        init = init.with_trace(t);
    }
    let opts = RunOptions {
        seed: spec.seed,
        holdout_fraction: plan.training.holdout_fraction,
        parallel,
    };
    let grid = make_grid(spec.method);
    let outcome = run_framework(spec.framework, &stream, spec.method, &grid, &init, &opts)?;
    let eval = EvalReport::compute(&outcome.learner, &stream)?;
    Ok(RunArtifacts {
        record: RunRecord::new(&outcome, spec.method, spec.seed, eval),
        selections: outcome.selections,
        learner: outcome.learner,
    })
}

fn write_run(plan: &ExperimentPlan, spec: RunSpec, art: &RunArtifacts, dump_buffer: bool) -> Result<IndexEntry> {
    let stem = spec.stem();
    let run_file = format!("runs/{stem}.json");
    persist_run(&art.record, plan.output.join(&run_file))?;
    let mut histograms = Vec::new();
    for phase in &art.selections {
        let label = match phase.task {
            Some(t) => format!("task{t}"),
            None => "stream".to_string(),
        };
        let name = format!("histograms/{stem}__{label}.csv");
        let rows: Vec<_> = phase
            .trials
            .iter()
            .map(|t| (t.config.clone(), t.score))
            .collect();
        emit_histogram(&rows, plan.output.join(&name))?;
        histograms.push(name);
    }
    if dump_buffer {
        let path = plan.output.join(format!("buffers/{stem}.csv"));
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        art.learner.buffer.dump_csv(path)?;
    }
    Ok(IndexEntry {
        method: spec.method,
        framework: spec.framework,
        seed: spec.seed,
        status: "ok".into(),
        run_file: Some(run_file),
        histograms,
        error: None,
    })
}

/// Execute every run of `plan`, writing results under `plan.output`.
pub fn execute(plan: &ExperimentPlan, opts: ExecOptions) -> Result<RunIndex> {
    let dataset = plan.load_dataset()?;
    let runs = plan.runs();
    let one = |spec: &RunSpec| -> IndexEntry {
        let result = run_one(plan, &dataset, *spec, opts.parallel, None)
            .and_then(|art| write_run(plan, *spec, &art, opts.dump_buffer));
        result.unwrap_or_else(|e| {
            log::error!("run {} failed: {e}", spec.stem());
            IndexEntry {
                method: spec.method,
                framework: spec.framework,
                seed: spec.seed,
                status: "error".into(),
                run_file: None,
                histograms: Vec::new(),
                error: Some(e.to_string()),
            }
        })
    };
    let entries: Vec<IndexEntry> = if opts.parallel {
        runs.par_iter().map(one).collect()
    } else {
        runs.iter().map(one).collect()
    };
    let index = RunIndex {
        schema: INDEX_SCHEMA.into(),
        runs: entries,
    };
    let mut text = serde_json::to_string_pretty(&index)?;
    text.push('\n');
    write_atomic(&plan.output.join("index.json"), text.as_bytes())?;
    Ok(index)
}

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: MethodKind,
    pub framework: Framework,
    pub n_runs: usize,
    pub n_failed: usize,
    pub class_il_mean: f64,
    pub class_il_se: Option<f64>,
    pub task_il_mean: f64,
    pub task_il_se: Option<f64>,
    pub ledger_total_mean: f64,
    pub bold_class_il: bool,
    pub bold_task_il: bool,
}

/// Sample standard deviation over `sqrt(n)`; undefined for fewer than two values.
pub fn standard_error(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Some(var.sqrt() / (n as f64).sqrt())
}

/// For each entry, whether it beats every other entry by more than
/// [`BOLD_MARGIN`]. A lone entry is never marked.
pub fn bold_markers(means: &[f64]) -> Vec<bool> {
    (0..means.len())
        .map(|i| {
            let best_other = means
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, &m)| m)
                .fold(f64::NEG_INFINITY, f64::max);
            best_other.is_finite() && means[i] - best_other > BOLD_MARGIN
        })
        .collect()
}

/// Aggregate the run files of `results_dir` into comparison rows.
pub fn build_report(results_dir: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let dir = results_dir.as_ref();
    let runs_dir = dir.join("runs");
    let mut records = Vec::new();
    if runs_dir.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(&runs_dir)
            .map_err(|e| Error::io(&runs_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            records.push(load_run(&p)?);
        }
    }
    ensure!(
        !records.is_empty(),
        Argument,
        "no run files found under {}",
        runs_dir.display()
    );

    let mut failed: BTreeMap<(MethodKind, Framework), usize> = BTreeMap::new();
    let index_path = dir.join("index.json");
    if index_path.is_file() {
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: RunIndex = serde_json::from_str(&text)?;
        for r in index.runs.iter().filter(|r| r.status != "ok") {
            *failed.entry((r.method, r.framework)).or_default() += 1;
        }
    }

    let mut groups: BTreeMap<(MethodKind, Framework), Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.method, r.framework)).or_default().push(r);
    }
    for key in failed.keys() {
        groups.entry(*key).or_default();
    }

    let mut rows: Vec<ReportRow> = groups
        .iter()
        .map(|(&(method, framework), rs)| {
            let cil: Vec<f64> = rs.iter().map(|r| r.eval.average_accuracy_class_il).collect();
            let til: Vec<f64> = rs.iter().map(|r| r.eval.average_accuracy_task_il).collect();
            let units: Vec<f64> = rs.iter().map(|r| r.ledger.total() as f64).collect();
            let empty = rs.is_empty();
            ReportRow {
                method,
                framework,
                n_runs: rs.len(),
                n_failed: failed.get(&(method, framework)).copied().unwrap_or(0),
                class_il_mean: if empty { f64::NAN } else { mean(&cil) },
                class_il_se: standard_error(&cil),
                task_il_mean: if empty { f64::NAN } else { mean(&til) },
                task_il_se: standard_error(&til),
                ledger_total_mean: if empty { f64::NAN } else { mean(&units) },
                bold_class_il: false,
                bold_task_il: false,
            }
        })
        .collect();

    let methods: Vec<MethodKind> = {
        let mut m: Vec<_> = rows.iter().map(|r| r.method).collect();
        m.dedup();
        m
    };
    for method in methods {
        let idx: Vec<usize> = (0..rows.len())
            .filter(|&i| rows[i].method == method && rows[i].n_runs > 0)
            .collect();
        let cil: Vec<f64> = idx.iter().map(|&i| rows[i].class_il_mean).collect();
        let til: Vec<f64> = idx.iter().map(|&i| rows[i].task_il_mean).collect();
        for ((&i, bc), bt) in idx.iter().zip(bold_markers(&cil)).zip(bold_markers(&til)) {
            rows[i].bold_class_il = bc;
            rows[i].bold_task_il = bt;
        }
    }
    Ok(rows)
}

pub const REPORT_COLUMNS: [&str; 11] = [
    "method",
    "framework",
    "n_runs",
    "n_failed",
    "class_il_mean",
    "class_il_se",
    "task_il_mean",
    "task_il_se",
    "ledger_total_mean",
    "bold_class_il",
    "bold_task_il",
];

/// Write `comparison.csv` into `results_dir` (or `out`) and return its path.
pub fn report(results_dir: impl AsRef<Path>, out: Option<&Path>) -> Result<(PathBuf, Vec<ReportRow>)> {
    let dir = results_dir.as_ref();
    let rows = build_report(dir)?;
    let path = out.map_or_else(|| dir.join("comparison.csv"), Path::to_path_buf);
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(REPORT_COLUMNS)?;
    let num = |v: f64| if v.is_nan() { String::new() } else { v.to_string() };
    let se = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &rows {
        w.write_record([
            r.method.to_string(),
            r.framework.to_string(),
            r.n_runs.to_string(),
            r.n_failed.to_string(),
            num(r.class_il_mean),
            se(r.class_il_se),
            num(r.task_il_mean),
            se(r.task_il_se),
            num(r.ledger_total_mean),
            r.bold_class_il.to_string(),
            r.bold_task_il.to_string(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Parse(format!("csv buffer: {e}")))?;
    write_atomic(&path, &bytes)?;
    Ok((path, rows))
}
