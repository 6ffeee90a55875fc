//! Spike-class metrics, threshold moving and cross-validation aggregation.
//!
//! A frame is predicted positive iff its probability is `>= threshold`.
//! Ratios with a zero denominator are reported as 0. All metrics are in
//! percent.

use crate::dataset::{balance_indices, FrameSet};
use crate::error::{invalid, Error, Result};
use crate::models::{Model, ModelKind, SensorGraph};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};

pub const GRID_STEPS: usize = 1000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    pub specificity: f64,
    pub sensitivity: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "f1", "specificity", "sensitivity"];

    pub fn values(&self) -> [f64; 4] {
        [self.accuracy, self.f1, self.specificity, self.sensitivity]
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

fn f1_of(c: &Confusion) -> f64 {
    pct(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

impl From<Confusion> for Metrics {
    fn from(c: Confusion) -> Self {
        Self {
            accuracy: pct(c.tp + c.tn, c.total()),
            f1: f1_of(&c),
            specificity: pct(c.tn, c.tn + c.fp),
            sensitivity: pct(c.tp, c.tp + c.fn_),
        }
    }
}

pub fn confusion(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    if probs.len() != labels.len() {
        return invalid(format!("{} probabilities vs {} labels", probs.len(), labels.len()));
    }
    let mut c = Confusion::default();
    for (&p, &l) in probs.iter().zip(labels) {
        match (p >= threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn compute_metrics(probs: &[f64], labels: &[u8], threshold: f64) -> Result<Metrics> {
    if probs.is_empty() {
        return invalid("no frames to score");
    }
    confusion(probs, labels, threshold).map(Metrics::from)
}

/// `{0.001, 0.002, ..., 0.999}`.
pub fn threshold_grid() -> Vec<f64> {
    (1..GRID_STEPS).map(|i| i as f64 / GRID_STEPS as f64).collect()
}

/// Spike-class f1 (percent) at each threshold of `grid`.
pub fn f1_curve(probs: &[f64], labels: &[u8], grid: &[f64]) -> Result<Vec<f64>> {
    if probs.len() != labels.len() {
        return invalid(format!("{} probabilities vs {} labels", probs.len(), labels.len()));
    }
    // Sorting once lets each threshold be answered by two binary searches.
    let mut pos: Vec<f64> = Vec::new();
    let mut neg: Vec<f64> = Vec::new();
    for (&p, &l) in probs.iter().zip(labels) {
        if l == 1 { pos.push(p) } else { neg.push(p) }
    }
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let at_least = |v: &[f64], t: f64| v.len() - v.partition_point(|&p| p < t);
    Ok(grid
        .iter()
        .map(|&t| {
            let tp = at_least(&pos, t);
            let fp = at_least(&neg, t);
            f1_of(&Confusion {
                tp,
                fp,
                tn: neg.len() - fp,
                fn_: pos.len() - tp,
            })
        })
        .collect())
}

/// Smallest grid threshold maximizing spike-class f1.
pub fn optimal_threshold(probs: &[f64], labels: &[u8], grid: &[f64]) -> Result<f64> {
    if !labels.contains(&1) {
        return Err(Error::EmptyClass("threshold calibration needs a positive frame".into()));
    }
    if grid.is_empty() {
        return invalid("empty threshold grid");
    }
    let curve = f1_curve(probs, labels, grid)?;
    let mut best = 0;
    for (i, &f) in curve.iter().enumerate() {
        if f > curve[best] {
            best = i;
        }
    }
    Ok(grid[best])
}

/// All positives plus as many seeded-sampled negatives; indices into `labels`.
pub fn balanced_test_sample(labels: &[u8], rng: &mut Rng) -> Result<Vec<usize>> {
    balance_indices(labels, rng)
}

/// Eval-mode probabilities for every frame, in chunks.
pub fn predict_frames(model: &Model, graph: Option<&SensorGraph>, frames: &FrameSet) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(frames.len());
    let per = frames.frame_len();
    for chunk in frames.data.chunks(CHUNK * per) {
        out.extend(model.predict(chunk, graph)?.into_iter().map(f64::from));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    /// Threshold 0.5 on the balanced test sample.
    pub balanced: Metrics,
    pub balanced_confusion: Confusion,
    /// Validation-calibrated threshold on all test frames.
    pub imbalanced: Metrics,
    pub imbalanced_confusion: Confusion,
    pub threshold: f64,
    /// Validation f1 at the calibrated threshold and at 0.5.
    pub val_f1_calibrated: f64,
    pub val_f1_half: f64,
    /// Test f1 at 0.5 on the imbalanced frames.
    pub test_f1_half: f64,
    /// Test f1 at every grid threshold.
    pub test_f1_curve: Vec<f64>,
}

/// Balanced and imbalanced evaluation of one trained model. The threshold
/// is chosen from `val` alone; test labels only enter the reported scores.
pub fn evaluate_iteration(
    model: &Model,
    graph: Option<&SensorGraph>,
    test: &FrameSet,
    val: &FrameSet,
    rng: &mut Rng,
) -> Result<IterationMetrics> {
    let grid = threshold_grid();
    let val_probs = predict_frames(model, graph, val)?;
    let threshold = optimal_threshold(&val_probs, &val.labels, &grid)?;
    evaluate_with_threshold(model, graph, test, threshold, rng).map(|mut m| {
        let val_curve = f1_curve(&val_probs, &val.labels, &[threshold, 0.5]).expect("lengths match");
        m.val_f1_calibrated = val_curve[0];
        m.val_f1_half = val_curve[1];
        m
    })
}

/// Scores `test` at a fixed imbalanced-regime threshold.
pub fn evaluate_with_threshold(
    model: &Model,
    graph: Option<&SensorGraph>,
    test: &FrameSet,
    threshold: f64,
    rng: &mut Rng,
) -> Result<IterationMetrics> {
    let probs = predict_frames(model, graph, test)?;
    let sample = balanced_test_sample(&test.labels, rng)?;
    let bp: Vec<f64> = sample.iter().map(|&i| probs[i]).collect();
    let bl: Vec<u8> = sample.iter().map(|&i| test.labels[i]).collect();
    let balanced_confusion = confusion(&bp, &bl, 0.5)?;
    let imbalanced_confusion = confusion(&probs, &test.labels, threshold)?;
    let curve = f1_curve(&probs, &test.labels, &threshold_grid())?;
    Ok(IterationMetrics {
        balanced: balanced_confusion.into(),
        balanced_confusion,
        imbalanced: imbalanced_confusion.into(),
        imbalanced_confusion,
        threshold,
        val_f1_calibrated: f64::NAN,
        val_f1_half: f64::NAN,
        test_f1_half: f1_of(&confusion(&probs, &test.labels, 0.5)?),
        test_f1_curve: curve,
    })
}

/// Population mean and standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.1}±{:.1}", self.mean, self.std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Balanced,
    Imbalanced,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Balanced => "balanced",
            Regime::Imbalanced => "imbalanced",
        }
    }
}

/// Outcome of one (repetition, fold, model) cross-validation cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub repetition: usize,
    pub fold: usize,
    pub model: ModelKind,
    pub test_patients: Vec<String>,
    pub validation_patients: Vec<String>,
    pub epochs_run: usize,
    pub best_val_loss: Option<f64>,
    pub metrics: Option<IterationMetrics>,
    /// Why the iteration was excluded from aggregation.
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: ModelKind,
    pub regime: Regime,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub formatted: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelThresholds {
    pub model: ModelKind,
    pub thresholds: Vec<f64>,
    /// Test f1 averaged over iterations at each grid threshold.
    pub mean_test_f1_curve: Vec<f64>,
    /// Grid threshold with the highest averaged test f1.
    pub best_test_threshold: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricRow>,
    pub thresholds: Vec<ModelThresholds>,
    pub n_iterations: usize,
    pub n_skipped: usize,
    pub iterations: Vec<IterationRecord>,
}

impl MetricsReport {
    pub fn row(&self, model: ModelKind, regime: Regime, metric: &str) -> Option<&MetricRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.regime == regime && r.metric == metric)
    }

    /// Table with one line per (model, regime) and one column per metric.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<11} {:>12} {:>12} {:>12} {:>12}\n",
            "model", "regime", "accuracy", "f1", "specificity", "sensitivity"
        );
        let mut keys: Vec<(ModelKind, Regime)> = self.rows.iter().map(|r| (r.model, r.regime)).collect();
        keys.dedup();
        for (model, regime) in keys {
            let cell = |m: &str| {
                self.row(model, regime, m)
                    .map(|r| r.formatted.clone())
                    .unwrap_or_else(|| "-".into())
            };
            out.push_str(&format!(
                "{:<12} {:<11} {:>12} {:>12} {:>12} {:>12}\n",
                model.as_str(),
                regime.as_str(),
                cell("accuracy"),
                cell("f1"),
                cell("specificity"),
                cell("sensitivity")
            ));
        }
        out
    }

    /// `threshold,f1_percent_<model>...` rows over the grid.
    pub fn threshold_curve_csv(&self) -> String {
        let mut out = String::from("threshold");
        for t in &self.thresholds {
            out.push_str(&format!(",f1_percent_{}", t.model));
        }
        out.push('\n');
        for (i, th) in threshold_grid().iter().enumerate() {
            out.push_str(&format!("{th:.3}"));
            for t in &self.thresholds {
                match t.mean_test_f1_curve.get(i) {
                    Some(v) => out.push_str(&format!(",{v:.4}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Aggregates per-iteration records in `(repetition, fold, model)` order.
/// Skipped iterations are excluded from every statistic.
pub fn aggregate_cv(records: &[IterationRecord]) -> MetricsReport {
    let mut records = records.to_vec();
    records.sort_by_key(|r| (r.repetition, r.fold, r.model));
    let mut models: Vec<ModelKind> = records.iter().map(|r| r.model).collect();
    models.sort();
    models.dedup();
    let mut rows = Vec::new();
    let mut thresholds = Vec::new();
    for &model in &models {
        let done: Vec<&IterationMetrics> = records
            .iter()
            .filter(|r| r.model == model && r.skipped.is_none())
            .filter_map(|r| r.metrics.as_ref())
            .collect();
        for regime in [Regime::Balanced, Regime::Imbalanced] {
            for (k, name) in Metrics::NAMES.iter().enumerate() {
                let vals: Vec<f64> = done
                    .iter()
                    .map(|m| match regime {
                        Regime::Balanced => m.balanced.values()[k],
                        Regime::Imbalanced => m.imbalanced.values()[k],
                    })
                    .collect();
                if let Some(s) = Summary::of(&vals) {
                    rows.push(MetricRow {
                        model,
                        regime,
                        metric: name.to_string(),
                        mean: s.mean,
                        std: s.std,
                        formatted: s.to_string(),
                    });
                }
            }
        }
        let grid = threshold_grid();
        let mean_curve: Vec<f64> = if done.is_empty() {
            Vec::new()
        } else {
            (0..grid.len())
                .map(|i| done.iter().map(|m| m.test_f1_curve[i]).sum::<f64>() / done.len() as f64)
                .collect()
        };
        let best_test_threshold = (!mean_curve.is_empty()).then(|| {
            let mut b = 0;
            for (i, &v) in mean_curve.iter().enumerate() {
                if v > mean_curve[b] {
                    b = i;
                }
            }
            grid[b]
        });
        thresholds.push(ModelThresholds {
            model,
            thresholds: done.iter().map(|m| m.threshold).collect(),
            mean_test_f1_curve: mean_curve,
            best_test_threshold,
        });
    }
    MetricsReport {
        rows,
        thresholds,
        n_iterations: records.len(),
        n_skipped: records.iter().filter(|r| r.skipped.is_some()).count(),
        iterations: records,
    }
}
