//! Frozen-feature transfer evaluation: multinomial logistic-regression probe
//! with an L2 grid, and a dense-task head fine-tune scored by mIoU.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::SubBackbone;
use crate::data::{make_synthetic_source, step_rng, Labels, Source, SyntheticGeneratorSpec};
use crate::error::{Error, Result};
use crate::heads::{task_loss, Head, HeadKind, HeadSpec, LossKind};
use crate::nn::{apply_batch_stats, gemm, Graph, Mode, ParamStore, Sgd, Tensor};
use crate::schedule::ScheduleConfig;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const EXTRACT_CHUNK: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferDataset {
    pub name: String,
    pub generator: SyntheticGeneratorSpec,
    #[serde(default = "default_train")]
    pub train_size: usize,
    #[serde(default = "default_test")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_train() -> usize {
    600
}
fn default_test() -> usize {
    300
}

impl TransferDataset {
    pub fn train_source(&self) -> Source {
        make_synthetic_source(&format!("{}/train", self.name), &self.generator, self.train_size, self.seed)
    }

    pub fn test_source(&self) -> Source {
        make_synthetic_source(
            &format!("{}/test", self.name),
            &self.generator,
            self.test_size,
            self.seed ^ 0x7e57_0000_0000_0001,
        )
    }
}

/// Dense-task evaluation: a fresh segmentation head trained on frozen features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegTransfer {
    pub dataset: TransferDataset,
    #[serde(default = "default_seg_steps")]
    pub steps: usize,
    #[serde(default = "default_seg_lr")]
    pub lr: f64,
    #[serde(default = "default_seg_batch")]
    pub batch_size: usize,
}

fn default_seg_steps() -> usize {
    150
}
fn default_seg_lr() -> f64 {
    0.05
}
fn default_seg_batch() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "default_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default = "default_iters")]
    pub max_iterations: usize,
    /// 1-based stage whose pooled output is probed; defaults to D.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_stage: Option<usize>,
    #[serde(default = "default_val")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub transfer_datasets: Vec<TransferDataset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_transfer: Option<SegTransfer>,
}

fn default_grid() -> Vec<f64> {
    vec![1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
}
fn default_iters() -> usize {
    1000
}
fn default_val() -> f64 {
    0.2
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda_grid: default_grid(),
            max_iterations: default_iters(),
            feature_stage: None,
            validation_fraction: default_val(),
            seed: 0,
            transfer_datasets: Vec::new(),
            seg_transfer: None,
        }
    }
}

impl ProbeConfig {
    pub fn problems(&self, depth: usize, image_size: [usize; 2]) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |f: &str, m: String| out.push((f.to_string(), m));
        let grid = &self.lambda_grid;
        if grid.is_empty() {
            push("lambda_grid", "must not be empty".into());
        } else if grid.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            push("lambda_grid", "values must be positive".into());
        } else {
            let mut logs: Vec<f64> = grid.iter().map(|l| l.log10()).collect();
            logs.sort_by(f64::total_cmp);
            let (lo, hi) = (logs[0], logs[logs.len() - 1]);
            if lo < -5.0 - 1e-9 || hi > -1.0 + 1e-9 {
                push("lambda_grid", "values must lie within [1e-5, 1e-1]".into());
            }
            if logs.len() >= 2 {
                if (lo + 5.0).abs() > 1e-9 || (hi + 1.0).abs() > 1e-9 {
                    push("lambda_grid", "must span 1e-5 to 1e-1".into());
                }
                let step = (hi - lo) / (logs.len() - 1) as f64;
                if logs.windows(2).any(|w| (w[1] - w[0] - step).abs() > 1e-6) {
                    push("lambda_grid", "must be log-evenly spaced".into());
                }
            }
        }
        if self.max_iterations == 0 {
            push("max_iterations", "must be positive".into());
        }
        if let Some(s) = self.feature_stage {
            if s == 0 || s > depth {
                push("feature_stage", format!("must be within 1..={depth}"));
            }
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            push("validation_fraction", "must lie strictly between 0 and 1".into());
        }
        let mut names = std::collections::BTreeSet::new();
        for (i, d) in self.transfer_datasets.iter().enumerate() {
            let at = format!("transfer_datasets[{i}]");
            if !names.insert(d.name.as_str()) {
                push(&at, format!("duplicate dataset name {:?}", d.name));
            }
            if d.generator.kind.is_dense() {
                push(&format!("{at}.generator.kind"), "probe datasets must be image-level".into());
            }
            for p in d.generator.problems() {
                push(&format!("{at}.generator"), p);
            }
            if d.generator.image_size != image_size {
                push(&format!("{at}.generator.image_size"), "must match the backbone input".into());
            }
            if d.train_size < 10 || d.test_size == 0 {
                push(&at, "needs at least 10 training and 1 test sample".into());
            }
        }
        if let Some(seg) = &self.seg_transfer {
            if !seg.dataset.generator.kind.is_dense() {
                push("seg_transfer.dataset.generator.kind", "must be a dense generator".into());
            }
            for p in seg.dataset.generator.problems() {
                push("seg_transfer.dataset.generator", p);
            }
            if seg.dataset.generator.image_size != image_size {
                push("seg_transfer.dataset.generator.image_size", "must match the backbone input".into());
            }
            if seg.steps == 0 || seg.batch_size == 0 || !(seg.lr > 0.0) {
                push("seg_transfer", "steps, batch_size and lr must be positive".into());
            }
            if seg.dataset.train_size < seg.batch_size || seg.dataset.test_size == 0 {
                push("seg_transfer.dataset", "train set smaller than one batch".into());
            }
        }
        out
    }
}

/// Anything that maps images to per-stage feature maps in inference mode.
pub trait FeatureExtractor {
    /// `[N, C_i, H_i, W_i]` for every stage, shallowest first.
    fn stage_maps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// A sub-backbone and its parameters, frozen.
pub struct FrozenBackbone<'a> {
    pub backbone: &'a SubBackbone,
    pub store: &'a ParamStore,
}

impl FeatureExtractor for FrozenBackbone<'_> {
    fn stage_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        self.backbone.features(self.store, Mode::Eval, images)
    }
}

/// Row-major sample × feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Features {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self { rows: idx.len(), cols: self.cols, data }
    }
}

/// Channel means over space: `[N, C, H, W]` → `N × C`.
pub fn pool_rows(map: &Tensor) -> Result<Features> {
    let (n, c, h, w) = map.dims4()?;
    let hw = (h * w) as f64;
    let data = map.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / hw).collect();
    Features::new(n, c, data)
}

/// Pooled stage-`stage` features and class labels of the first `count`
/// samples of `source`.
pub fn extract_features(
    model: &dyn FeatureExtractor,
    source: &Source,
    count: usize,
    stage: usize,
) -> Result<(Features, Vec<usize>)> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut cols = 0;
    let count = count.min(source.size);
    let mut start = 0;
    while start < count {
        let end = (start + EXTRACT_CHUNK).min(count);
        let idx: Vec<usize> = (start..end).collect();
        let batch = source.batch(&idx);
        let maps = model.stage_maps(&batch.images)?;
        let map = maps
            .get(stage.wrapping_sub(1))
            .ok_or_else(|| Error::Invalid(format!("feature stage {stage} outside 1..={}", maps.len())))?;
        let f = pool_rows(map)?;
        cols = f.cols;
        data.extend(f.data);
        match batch.labels {
            Labels::Classes(l) => labels.extend(l),
            Labels::Masks(_) => return Err(Error::Invalid(format!("{} is not image-level", source.source_id))),
        }
        start = end;
    }
    Ok((Features::new(labels.len(), cols, data)?, labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    pub best_lambda: f64,
    pub train_accuracy: f64,
    /// (λ, validation accuracy) in grid order.
    pub validation: Vec<(f64, f64)>,
    pub predictions: Vec<usize>,
}

/// Per-column mean and scale of the training rows; constant columns map to 0.
struct Standardizer {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &Features) -> Self {
        let n = x.rows.max(1) as f64;
        let mut mean = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; x.cols];
        for r in 0..x.rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        let inv_std = var.iter().map(|v| if *v > 1e-24 { 1.0 / v.sqrt() } else { 0.0 }).collect();
        Self { mean, inv_std }
    }

    /// Standardised rows with a trailing constant-1 column for the bias.
    fn apply(&self, x: &Features) -> Features {
        let cols = x.cols + 1;
        let mut data = Vec::with_capacity(x.rows * cols);
        for r in 0..x.rows {
            for ((v, m), s) in x.row(r).iter().zip(&self.mean).zip(&self.inv_std) {
                data.push((v - m) * s);
            }
            data.push(1.0);
        }
        Features { rows: x.rows, cols, data }
    }
}

/// Mean cross-entropy plus `λ/2·‖W‖²` (bias column unpenalised) of a
/// `classes × cols` weight matrix; writes the gradient into `grad`.
fn logistic_objective(x: &Features, y: &[usize], classes: usize, lambda: f64, w: &[f64], grad: &mut [f64]) -> f64 {
    let (n, d) = (x.rows, x.cols);
    let mut logits = vec![0.0; n * classes];
    gemm(n, d, classes, &x.data, (d as isize, 1), w, (1, d as isize), 0.0, &mut logits, (classes as isize, 1));
    let mut loss = 0.0;
    for (row, &label) in logits.chunks_mut(classes).zip(y) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        loss += z.ln() - (row[label].ln());
        for v in row.iter_mut() {
            *v /= z;
        }
        row[label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    // grad = (P − Y)ᵀ X / n
    gemm(classes, n, d, &logits, (1, classes as isize), &x.data, (d as isize, 1), 0.0, grad, (d as isize, 1));
    let mut penalty = 0.0;
    for c in 0..classes {
        for j in 0..d {
            let k = c * d + j;
            grad[k] *= inv_n;
            if j + 1 < d {
                penalty += w[k] * w[k];
                grad[k] += lambda * w[k];
            }
        }
    }
    loss * inv_n + 0.5 * lambda * penalty
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Limited-memory BFGS with backtracking (Armijo) line search.
/// Returns the number of iterations used.
pub fn lbfgs(
    mut f: impl FnMut(&[f64], &mut [f64]) -> f64,
    x: &mut [f64],
    max_iterations: usize,
    grad_tol: f64,
) -> usize {
    const HISTORY: usize = 10;
    let n = x.len();
    let mut g = vec![0.0; n];
    let mut fx = f(x, &mut g);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    for it in 0..max_iterations {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= grad_tol {
            return it;
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alpha = vec![0.0; s_hist.len()];
        for i in (0..s_hist.len()).rev() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            alpha[i] = rho * dot(&s_hist[i], &q);
            for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
                *qv -= alpha[i] * yv;
            }
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..s_hist.len() {
            let rho = 1.0 / dot(&y_hist[i], &s_hist[i]);
            let beta = rho * dot(&y_hist[i], &q);
            for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
                *qv += (alpha[i] - beta) * sv;
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
            s_hist.clear();
            y_hist.clear();
        }
        let mut t = if s_hist.is_empty() { 1.0 / dot(&g, &g).sqrt().max(1.0) } else { 1.0 };
        let mut accepted = false;
        for _ in 0..40 {
            for i in 0..n {
                x_new[i] = x[i] + t * dir[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * t * slope {
                let s: Vec<f64> = x_new.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
                let sy = dot(&s, &y);
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                let improvement = fx - f_new;
                fx = f_new;
                if sy > 1e-12 * dot(&y, &y).max(1e-300) {
                    s_hist.push(s);
                    y_hist.push(y);
                    if s_hist.len() > HISTORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                }
                accepted = true;
                if improvement <= 1e-15 * fx.abs().max(1.0) {
                    return it + 1;
                }
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return it + 1;
        }
    }
    max_iterations
}

struct Fit {
    w: Vec<f64>,
    classes: usize,
}

impl Fit {
    fn train(x: &Features, y: &[usize], classes: usize, lambda: f64, init: Option<&[f64]>, max_iterations: usize) -> Self {
        let mut w = init.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; classes * x.cols]);
        lbfgs(|w, g| logistic_objective(x, y, classes, lambda, w, g), &mut w, max_iterations, 1e-7);
        Self { w, classes }
    }

    fn predict(&self, x: &Features) -> Vec<usize> {
        let mut logits = vec![0.0; x.rows * self.classes];
        let d = x.cols;
        gemm(x.rows, d, self.classes, &x.data, (d as isize, 1), &self.w, (1, d as isize), 0.0, &mut logits, (self.classes as isize, 1));
        logits
            .chunks(self.classes)
            .map(|row| {
                let mut best = 0;
                for (k, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}

/// Fits the probe on `train`, picks λ on a held-out slice of it, refits
/// on all of `train` and reports accuracy on `test`.
pub fn linear_probe(
    train: &Features,
    train_y: &[usize],
    test: &Features,
    test_y: &[usize],
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    if train.rows != train_y.len() || test.rows != test_y.len() || train.cols != test.cols {
        return Err(Error::Shape("probe features and labels disagree".into()));
    }
    let distinct: std::collections::BTreeSet<usize> = train_y.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Invalid("probe needs at least two classes in the training data".into()));
    }
    let classes = train_y.iter().chain(test_y).max().map_or(0, |m| m + 1);

    let mut order: Vec<usize> = (0..train.rows).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let n_val = ((train.rows as f64 * config.validation_fraction).round() as usize).clamp(1, train.rows - 1);
    let (val_idx, fit_idx) = order.split_at(n_val);
    let fit_raw = train.select(fit_idx);
    let fit_y: Vec<usize> = fit_idx.iter().map(|&i| train_y[i]).collect();
    let val_y: Vec<usize> = val_idx.iter().map(|&i| train_y[i]).collect();
    let sub = Standardizer::fit(&fit_raw);
    let fit_x = sub.apply(&fit_raw);
    let val_x = sub.apply(&train.select(val_idx));

    // strongest regularisation first, warm-starting down the path
    let mut path: Vec<f64> = config.lambda_grid.clone();
    path.sort_by(|a, b| b.total_cmp(a));
    let mut scores = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    for &lambda in &path {
        let fit = Fit::train(&fit_x, &fit_y, classes, lambda, warm.as_deref(), config.max_iterations);
        scores.push((lambda, accuracy(&fit.predict(&val_x), &val_y)));
        warm = Some(fit.w);
    }
    // strict improvement only, so ties stay with the larger λ seen first
    let mut best = scores[0];
    for &s in &scores[1..] {
        if s.1 > best.1 {
            best = s;
        }
    }

    let full = Standardizer::fit(train);
    let train_x = full.apply(train);
    let test_x = full.apply(test);
    let fit = Fit::train(&train_x, train_y, classes, best.0, None, config.max_iterations);
    let predictions = fit.predict(&test_x);
    let validation = config
        .lambda_grid
        .iter()
        .map(|l| *scores.iter().find(|s| s.0 == *l).expect("grid value scored"))
        .collect();
    Ok(ProbeResult {
        accuracy: accuracy(&predictions, test_y),
        best_lambda: best.0,
        train_accuracy: accuracy(&fit.predict(&train_x), train_y),
        validation,
        predictions,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetScore {
    pub name: String,
    pub accuracy: f64,
    pub best_lambda: f64,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub schema_version: u32,
    pub model: String,
    pub datasets: Vec<DatasetScore>,
    /// Macro average of the per-dataset accuracies.
    pub avg_cls: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_miou: Option<f64>,
}

impl TransferReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("transfer report: {e}")))
    }
}

pub fn macro_average(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Probes every configured dataset (and the dense task, when configured).
pub fn evaluate_transfer(model: &dyn FeatureExtractor, name: &str, config: &ProbeConfig, depth: usize) -> Result<TransferReport> {
    if config.transfer_datasets.is_empty() {
        return Err(Error::MissingTask("no transfer datasets configured".into()));
    }
    let stage = config.feature_stage.unwrap_or(depth);
    let mut datasets = Vec::new();
    for d in &config.transfer_datasets {
        let (train_x, train_y) = extract_features(model, &d.train_source(), d.train_size, stage)?;
        let (test_x, test_y) = extract_features(model, &d.test_source(), d.test_size, stage)?;
        let r = linear_probe(&train_x, &train_y, &test_x, &test_y, config)?;
        datasets.push(DatasetScore {
            name: d.name.clone(),
            accuracy: r.accuracy,
            best_lambda: r.best_lambda,
            train_accuracy: r.train_accuracy,
        });
    }
    let avg_cls = macro_average(&datasets.iter().map(|d| d.accuracy).collect::<Vec<_>>());
    let seg_miou = match &config.seg_transfer {
        Some(seg) => Some(seg_transfer_miou(model, seg, config.seed)?),
        None => None,
    };
    Ok(TransferReport { schema_version: REPORT_SCHEMA_VERSION, model: name.to_string(), datasets, avg_cls, seg_miou })
}

/// Mean intersection-over-union over classes that occur in either map.
pub fn mean_iou(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[t] += 1;
        }
    }
    let ious: Vec<f64> =
        inter.iter().zip(&union).filter(|(_, u)| **u > 0).map(|(i, u)| *i as f64 / *u as f64).collect();
    macro_average(&ious)
}

/// Trains a segmentation head over frozen stage maps and scores it on the
/// held-out split.
pub fn seg_transfer_miou(model: &dyn FeatureExtractor, seg: &SegTransfer, seed: u64) -> Result<f64> {
    let train = seg.dataset.train_source();
    let test = seg.dataset.test_source();
    let classes = seg.dataset.generator.num_classes;
    let size = seg.dataset.generator.image_size;
    let probe = model.stage_maps(&train.batch(&[0]).images)?;
    let channels: Vec<usize> = probe.iter().map(|t| t.shape()[1]).collect();
    let spec = HeadSpec::default_for(HeadKind::Segmentation, channels.len());
    let mut store = ParamStore::new();
    let head = Head::build(&spec, &channels, classes, size, &mut store, "seg_probe", seed)?;
    let sched = ScheduleConfig::with_steps(seg.steps);
    let mut opt = Sgd::new(sched.momentum, sched.weight_decay);
    for step in 0..seg.steps {
        let mut rng = step_rng(seed, step, "seg-transfer");
        let idx: Vec<usize> = (0..seg.batch_size).map(|_| rand::Rng::random_range(&mut rng, 0..train.size)).collect();
        let batch = train.batch(&idx);
        let maps = model.stage_maps(&batch.images)?;
        let mut g = Graph::new();
        let feats: Vec<_> = maps.into_iter().map(|m| g.constant(m)).collect();
        let logits = head.forward(&mut g, &store, Mode::Train, &feats)?;
        let loss = task_loss(&mut g, LossKind::PerPixelCe, logits, &batch.labels)?;
        if !g.value(loss).is_finite() {
            return Err(Error::NonFinite { step, task: "seg-transfer".into(), source_id: train.source_id.clone() });
        }
        let grads = g.backward(loss)?;
        apply_batch_stats(&mut store, &g.take_batch_stats());
        opt.step(&mut store, &grads, seg.lr * crate::schedule::lr_at(step, &sched) / sched.base_lr, None);
    }
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    let mut start = 0;
    while start < test.size {
        let end = (start + EXTRACT_CHUNK).min(test.size);
        let batch = test.batch(&(start..end).collect::<Vec<_>>());
        let maps = model.stage_maps(&batch.images)?;
        let mut g = Graph::new();
        let feats: Vec<_> = maps.into_iter().map(|m| g.constant(m)).collect();
        let logits = head.forward(&mut g, &store, Mode::Eval, &feats)?;
        let (n, c, h, w) = g.value(logits).dims4()?;
        let data = g.value(logits).data();
        for s in 0..n {
            for p in 0..h * w {
                let mut best = 0;
                for k in 1..c {
                    if data[(s * c + k) * h * w + p] > data[(s * c + best) * h * w + p] {
                        best = k;
                    }
                }
                pred.push(best);
            }
        }
        truth.extend_from_slice(batch.labels.as_slice());
        start = end;
    }
    Ok(mean_iou(&pred, &truth, classes))
}
