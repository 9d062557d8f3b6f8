//! Dense ReLU network with analytic backpropagation and plain SGD.
//!
//! Everything is `f64`, row-major and single-threaded so training runs are
//! bit-reproducible from a seed.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng as _;

use crate::error::{ensure, Error, Result};
use crate::seed;
use crate::streamgen::Example;

/// Header line of the text checkpoint format.
pub const CHECKPOINT_HEADER: &str = "CLHPO-MLP-1";

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            Shape,
            "ragged rows in matrix"
        );
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

/// Fully connected layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub layers: Vec<DenseLayer>,
}

/// Partial derivatives laid out exactly like [`MlpModel`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations kept from a forward pass for backpropagation.
///
/// `acts[0]` is the input, `acts[l + 1]` the output of layer `l` (after ReLU
/// for hidden layers), so the last entry holds the logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    acts: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Matrix {
        self.acts.last().expect("trace always holds the input")
    }

    /// Output of the last hidden layer (the input itself for a linear model).
    pub fn embedding(&self) -> &Matrix {
        &self.acts[self.acts.len() - 2]
    }
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, zero biases.
pub fn init_mlp(layer_dims: &[usize], seed: u64) -> Result<MlpModel> {
    ensure!(
        layer_dims.len() >= 2,
        Argument,
        "need at least input and output dims, got {layer_dims:?}"
    );
    ensure!(
        layer_dims.iter().all(|&d| d > 0),
        Argument,
        "layer dims must be positive, got {layer_dims:?}"
    );
    let mut rng = seed::rng(seed);
    let layers = layer_dims
        .windows(2)
        .map(|w| {
            let (inputs, outputs) = (w[0], w[1]);
            let bound = 1.0 / (inputs as f64).sqrt();
            DenseLayer {
                inputs,
                outputs,
                weights: (0..inputs * outputs)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect(),
                biases: vec![0.0; outputs],
            }
        })
        .collect();
    Ok(MlpModel { layers })
}

impl MlpModel {
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.outputs));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("model has layers").outputs
    }

    pub fn n_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }

    pub fn congruent(&self, other: &MlpModel) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    /// Stack example features into an input matrix.
    pub fn inputs(&self, batch: &[Example]) -> Result<Matrix> {
        let d = self.input_dim();
        let mut m = Matrix::zeros(batch.len(), d);
        for (i, ex) in batch.iter().enumerate() {
            ensure!(
                ex.features.len() == d,
                Shape,
                "example {} has {} features, model expects {d}",
                ex.id,
                ex.features.len()
            );
            m.row_mut(i).copy_from_slice(&ex.features);
        }
        Ok(m)
    }

    pub fn trace(&self, inputs: &Matrix) -> Result<ForwardTrace> {
        ensure!(
            inputs.cols == self.input_dim(),
            Shape,
            "input has {} columns, model expects {}",
            inputs.cols,
            self.input_dim()
        );
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(inputs.clone());
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let prev = acts.last().expect("nonempty");
            let mut out = Matrix::zeros(prev.rows, layer.outputs);
            for n in 0..prev.rows {
                let x = prev.row(n);
                let y = out.row_mut(n);
                for (o, yo) in y.iter_mut().enumerate() {
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    let mut z = layer.biases[o];
                    for (wi, xi) in w.iter().zip(x) {
                        z += wi * xi;
                    }
                    *yo = if l < last { z.max(0.0) } else { z };
                }
            }
            acts.push(out);
        }
        Ok(ForwardTrace { acts })
    }

    /// Logits for a batch, one row per example.
    pub fn forward(&self, batch: &[Example]) -> Result<Matrix> {
        let trace = self.trace(&self.inputs(batch)?)?;
        Ok(trace.acts.into_iter().last().expect("nonempty"))
    }

    /// Penultimate-layer features for a batch.
    pub fn embed(&self, batch: &[Example]) -> Result<Matrix> {
        let trace = self.trace(&self.inputs(batch)?)?;
        Ok(trace.embedding().clone())
    }

    /// Backpropagate `dlogits` (dLoss/dLogits) through a stored trace.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> GradientSet {
        let mut grads = GradientSet::zeros_like(self);
        let mut delta = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let prev = &trace.acts[l];
            let gw = &mut grads.weights[l];
            let gb = &mut grads.biases[l];
            for n in 0..delta.rows {
                let d = delta.row(n);
                let a = prev.row(n);
                for o in 0..layer.outputs {
                    let dn = d[o];
                    gb[o] += dn;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, ai) in row.iter_mut().zip(a) {
                        *g += dn * ai;
                    }
                }
            }
            if l > 0 {
                let mut next = Matrix::zeros(delta.rows, layer.inputs);
                for n in 0..delta.rows {
                    let d = delta.row(n);
                    let a = prev.row(n);
                    let out = next.row_mut(n);
                    for o in 0..layer.outputs {
                        let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                        for ((acc, wi), ai) in out.iter_mut().zip(w).zip(a) {
                            if *ai > 0.0 {
                                *acc += d[o] * wi;
                            }
                        }
                    }
                }
                delta = next;
            }
        }
        grads
    }

    /// Visit every parameter in a fixed order: per layer, weights then biases.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.biases.iter_mut()))
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()))
    }
}

impl GradientSet {
    pub fn zeros_like(model: &MlpModel) -> Self {
        GradientSet {
            weights: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn congruent(&self, model: &MlpModel) -> bool {
        self.weights.len() == model.layers.len()
            && model.layers.iter().enumerate().all(|(l, layer)| {
                self.weights[l].len() == layer.weights.len()
                    && self.biases[l].len() == layer.biases.len()
            })
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| w.iter_mut().chain(b.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }
}

fn allowed_classes(n_classes: usize, mask: Option<&[usize]>) -> Result<Vec<bool>> {
    match mask {
        None => Ok(vec![true; n_classes]),
        Some(ids) => {
            let mut allowed = vec![false; n_classes];
            for &c in ids {
                ensure!(
                    c < n_classes,
                    Argument,
                    "mask class {c} outside output range {n_classes}"
                );
                allowed[c] = true;
            }
            Ok(allowed)
        }
    }
}

/// Softmax over the allowed entries of `row`, written into `out`; disallowed
/// entries get probability zero.
/// Writes the masked softmax into `out` and returns the log partition
/// `max + ln(sum exp(z - max))`, so `ln p_k = z_k - log_z` stays finite.
fn masked_softmax(row: &[f64], allowed: &[bool], out: &mut [f64]) -> f64 {
    let max = row
        .iter()
        .zip(allowed)
        .filter(|(_, &a)| a)
        .map(|(&z, _)| z)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for ((o, &z), &a) in out.iter_mut().zip(row).zip(allowed) {
        *o = if a { (z - max).exp() } else { 0.0 };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

/// Output of [`softmax_cross_entropy`].
#[derive(Debug, Clone)]
pub struct CrossEntropy {
    /// `sum_i w_i * ce_i / n`.
    pub loss: f64,
    /// Unweighted `-log p(y_i)` per example.
    pub per_example: Vec<f64>,
    pub dlogits: Matrix,
}

/// Masked, optionally per-example-weighted softmax cross-entropy on logits.
pub fn softmax_cross_entropy(
    logits: &Matrix,
    labels: &[usize],
    mask: Option<&[usize]>,
    weights: Option<&[f64]>,
) -> Result<CrossEntropy> {
    ensure!(
        labels.len() == logits.rows,
        Shape,
        "{} labels for {} logit rows",
        labels.len(),
        logits.rows
    );
    if let Some(w) = weights {
        ensure!(w.len() == logits.rows, Shape, "weight count mismatch");
    }
    let allowed = allowed_classes(logits.cols, mask)?;
    for &y in labels {
        ensure!(
            y < logits.cols && allowed[y],
            Argument,
            "label {y} is outside the class mask"
        );
    }
    let n = logits.rows;
    let mut dlogits = Matrix::zeros(n, logits.cols);
    let mut per_example = Vec::with_capacity(n);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let probs = dlogits.row_mut(i);
        let log_z = masked_softmax(logits.row(i), &allowed, probs);
        let ce = log_z - logits.row(i)[y];
        let w = weights.map_or(1.0, |w| w[i]);
        per_example.push(ce);
        loss += w * ce;
        probs[y] -= 1.0;
        for g in probs.iter_mut() {
            *g *= w / n as f64;
        }
    }
    if n > 0 {
        loss /= n as f64;
    }
    Ok(CrossEntropy {
        loss,
        per_example,
        dlogits,
    })
}

fn labels_of(batch: &[Example]) -> Vec<usize> {
    batch.iter().map(|e| e.label).collect()
}

/// Mean softmax cross-entropy over `batch`, restricted to `class_mask`.
pub fn loss_and_grad(
    model: &MlpModel,
    batch: &[Example],
    class_mask: Option<&[usize]>,
) -> Result<(f64, GradientSet)> {
    let trace = model.trace(&model.inputs(batch)?)?;
    let ce = softmax_cross_entropy(trace.logits(), &labels_of(batch), class_mask, None)?;
    Ok((ce.loss, model.backward(&trace, &ce.dlogits)))
}

/// Cross-entropy against soft targets: `-mean_i sum_k q_ik log p_ik` over the
/// mask. Targets must be probability rows with zero mass outside the mask.
pub fn soft_target_loss_and_grad(
    model: &MlpModel,
    inputs: &[Example],
    target_probs: &Matrix,
    class_mask: Option<&[usize]>,
) -> Result<(f64, GradientSet)> {
    let trace = model.trace(&model.inputs(inputs)?)?;
    let logits = trace.logits();
    ensure!(
        target_probs.rows == logits.rows && target_probs.cols == logits.cols,
        Shape,
        "target shape {}x{} does not match logits {}x{}",
        target_probs.rows,
        target_probs.cols,
        logits.rows,
        logits.cols
    );
    let allowed = allowed_classes(logits.cols, class_mask)?;
    let n = logits.rows;
    let mut dlogits = Matrix::zeros(n, logits.cols);
    let mut loss = 0.0;
    for i in 0..n {
        let probs = dlogits.row_mut(i);
        let log_z = masked_softmax(logits.row(i), &allowed, probs);
        let target = target_probs.row(i);
        for k in 0..probs.len() {
            if allowed[k] {
                if target[k] > 0.0 {
                    loss -= target[k] * (logits.row(i)[k] - log_z);
                }
                probs[k] = (probs[k] - target[k]) / n as f64;
            }
        }
    }
    if n > 0 {
        loss /= n as f64;
    }
    Ok((loss, model.backward(&trace, &dlogits)))
}

/// Mean squared difference between live logits and `target_logits`.
pub fn mse_logit_loss_and_grad(
    model: &MlpModel,
    inputs: &[Example],
    target_logits: &Matrix,
) -> Result<(f64, GradientSet)> {
    let trace = model.trace(&model.inputs(inputs)?)?;
    let logits = trace.logits();
    ensure!(
        target_logits.rows == logits.rows && target_logits.cols == logits.cols,
        Shape,
        "target shape {}x{} does not match logits {}x{}",
        target_logits.rows,
        target_logits.cols,
        logits.rows,
        logits.cols
    );
    let count = (logits.rows * logits.cols) as f64;
    let mut dlogits = Matrix::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    for ((g, z), t) in dlogits
        .data
        .iter_mut()
        .zip(&logits.data)
        .zip(&target_logits.data)
    {
        let diff = z - t;
        loss += diff * diff;
        *g = 2.0 * diff / count;
    }
    if count > 0.0 {
        loss /= count;
    }
    Ok((loss, model.backward(&trace, &dlogits)))
}

/// `theta <- theta - lr * g`. No momentum, no weight decay.
pub fn sgd_step(model: &mut MlpModel, grads: &GradientSet, lr: f64) -> Result<()> {
    ensure!(
        lr.is_finite() && lr > 0.0,
        Argument,
        "learning rate must be positive, got {lr}"
    );
    ensure!(
        grads.congruent(model),
        Shape,
        "gradient shapes do not match the model"
    );
    ensure!(grads.is_finite(), Numeric, "non-finite gradient");
    for (p, g) in model.params_mut().zip(grads.values()) {
        *p -= lr * g;
    }
    Ok(())
}

/// Serialise in the `CLHPO-MLP-1` text format: header, `dims` line, then per
/// layer one `W <l>` block (one row per output unit) and one `b <l>` line.
pub fn checkpoint_to_string(model: &MlpModel) -> String {
    let mut out = String::new();
    let dims: Vec<String> = model.layer_dims().iter().map(usize::to_string).collect();
    let _ = writeln!(out, "{CHECKPOINT_HEADER}");
    let _ = writeln!(out, "dims {}", dims.join(" "));
    for (l, layer) in model.layers.iter().enumerate() {
        let _ = writeln!(out, "W {l}");
        for row in layer.weights.chunks(layer.inputs) {
            let _ = writeln!(out, "{}", join_f64(row));
        }
        let _ = writeln!(out, "b {l}");
        let _ = writeln!(out, "{}", join_f64(&layer.biases));
    }
    out
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| format!("{v:?}"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn checkpoint_from_str(text: &str) -> Result<MlpModel> {
    let mut lines = text.lines();
    ensure!(
        lines.next() == Some(CHECKPOINT_HEADER),
        Parse,
        "missing {CHECKPOINT_HEADER} header"
    );
    let dims: Vec<usize> = lines
        .next()
        .and_then(|l| l.strip_prefix("dims "))
        .ok_or_else(|| Error::Parse("missing dims line".into()))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad dim '{t}'"))))
        .collect::<Result<_>>()?;
    let mut model = init_mlp(&dims, 0)?;
    let parse_row = |line: Option<&str>, want: usize| -> Result<Vec<f64>> {
        let line = line.ok_or_else(|| Error::Parse("truncated checkpoint".into()))?;
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad value '{t}'"))))
            .collect::<Result<_>>()?;
        ensure!(
            row.len() == want,
            Parse,
            "expected {want} values, found {}",
            row.len()
        );
        Ok(row)
    };
    for (l, layer) in model.layers.iter_mut().enumerate() {
        ensure!(
            lines.next() == Some(format!("W {l}").as_str()),
            Parse,
            "missing weight block for layer {l}"
        );
        layer.weights.clear();
        for _ in 0..layer.outputs {
            layer.weights.extend(parse_row(lines.next(), layer.inputs)?);
        }
        ensure!(
            lines.next() == Some(format!("b {l}").as_str()),
            Parse,
            "missing bias line for layer {l}"
        );
        layer.biases = parse_row(lines.next(), layer.outputs)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &MlpModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

/// Loss functions covered by [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedLoss {
    CrossEntropy,
    MaskedCrossEntropy,
    MseLogits,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 3] = [
        CheckedLoss::CrossEntropy,
        CheckedLoss::MaskedCrossEntropy,
        CheckedLoss::MseLogits,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::CrossEntropy => "cross_entropy",
            CheckedLoss::MaskedCrossEntropy => "masked_cross_entropy",
            CheckedLoss::MseLogits => "mse_logits",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub loss: CheckedLoss,
    pub cases: usize,
    pub max_relative_error: f64,
    /// Coordinates skipped because the perturbation crossed a ReLU kink.
    pub skipped: usize,
}

fn hidden_signs(model: &MlpModel, inputs: &Matrix) -> Result<Vec<bool>> {
    let trace = model.trace(inputs)?;
    let hidden = &trace.acts[1..trace.acts.len() - 1];
    Ok(hidden
        .iter()
        .flat_map(|m| m.data.iter().map(|&v| v > 0.0))
        .collect())
}

/// Compare analytic gradients with central differences on `cases` random
/// models and batches. Relative error is `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn gradient_check(cases: usize, eps: f64, seed: u64) -> Result<Vec<GradCheck>> {
    ensure!(eps > 0.0, Argument, "eps must be positive");
    let mut out: Vec<GradCheck> = CheckedLoss::ALL
        .iter()
        .map(|&loss| GradCheck {
            loss,
            cases,
            max_relative_error: 0.0,
            skipped: 0,
        })
        .collect();
    for case in 0..cases {
        let mut rng = seed::rng(seed::derive(seed, &[case as u64]));
        let input = rng.gen_range(1..=5);
        let classes = rng.gen_range(2..=5);
        let mut dims = vec![input];
        dims.extend((0..rng.gen_range(0..=2)).map(|_| rng.gen_range(2..=6)));
        dims.push(classes);
        let mut model = init_mlp(&dims, rng.gen())?;
        for p in model.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let mut mask: Vec<usize> = (0..classes).filter(|_| rng.gen_bool(0.6)).collect();
        if mask.is_empty() {
            mask.push(rng.gen_range(0..classes));
        }
        let batch: Vec<Example> = (0..rng.gen_range(1..=4))
            .map(|id| Example {
                id,
                features: (0..input).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                label: mask[rng.gen_range(0..mask.len())],
            })
            .collect();
        let target_rows: Vec<Vec<f64>> = batch
            .iter()
            .map(|_| (0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let targets = Matrix::from_rows(&target_rows)?;
        let inputs = model.inputs(&batch)?;
        let base = hidden_signs(&model, &inputs)?;

        for check in out.iter_mut() {
            let eval = |m: &MlpModel| match check.loss {
                CheckedLoss::CrossEntropy => loss_and_grad(m, &batch, None),
                CheckedLoss::MaskedCrossEntropy => loss_and_grad(m, &batch, Some(&mask)),
                CheckedLoss::MseLogits => mse_logit_loss_and_grad(m, &batch, &targets),
            };
            let analytic: Vec<f64> = eval(&model)?.1.values().copied().collect();
            for (k, g) in analytic.iter().enumerate() {
                let mut plus = model.clone();
                let mut minus = model.clone();
                *plus.params_mut().nth(k).expect("index in range") += eps;
                *minus.params_mut().nth(k).expect("index in range") -= eps;
                if hidden_signs(&plus, &inputs)? != base || hidden_signs(&minus, &inputs)? != base {
                    check.skipped += 1;
                    continue;
                }
                let numeric = (eval(&plus)?.0 - eval(&minus)?.0) / (2.0 * eps);
                let rel = (g - numeric).abs() / (g.abs() + numeric.abs()).max(1e-6);
                check.max_relative_error = check.max_relative_error.max(rel);
            }
        }
    }
    Ok(out)
}
