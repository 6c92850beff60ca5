//! Metrics, per-run reports and cross-seed aggregation.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diagnostics::GeometrySummary;
use crate::error::{Error, Result};
use crate::ortho::LsuvReport;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    /// Open-set: AUROC of the anomalous-class probability.
    Auroc,
    /// Closed-set: top-1 accuracy.
    Accuracy,
}

/// Area under the ROC curve via the Mann–Whitney statistic: the fraction of
/// (positive, negative) pairs where the positive scores higher, with ties
/// credited one half. `labels[i]` is true for positives.
///
/// Uses average ranks, O(n log n).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Input("AUROC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives keeps tied (half-integer) ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average; twice it is i + j + 2.
        let positives = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += positives * (i + j + 2) as u128;
        i = j + 1;
    }
    let (p, q) = (n_pos as u128, n_neg as u128);
    // 2·U = 2·R_pos − p(p+1): twice the count of wins plus ties.
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok((twice_u as f64 / 2.0) / (p * q) as f64)
}

/// Fraction of rows whose argmax equals the label. Ties go to the lowest
/// class index.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = logits.dims2()?;
    if n == 0 || labels.len() != n {
        return Err(Error::Dimension(format!("{n} rows, {} labels", labels.len())));
    }
    let correct = logits
        .rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(correct as f64 / n as f64)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    pub train_regularizer: f64,
    pub val_loss: f64,
    pub val_metric: f64,
}

/// Everything one training run produces, apart from the checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    /// Resolved configuration of the run, seed excluded.
    pub config: serde_json::Value,
    pub metric: MetricKind,
    /// Epoch 0 holds the metrics of the initial weights.
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub test_metric: f64,
    pub geometry_init: GeometrySummary,
    pub geometry_best: GeometrySummary,
    pub init_scheme: String,
    pub lsuv: Option<LsuvReport>,
    pub wall_time_secs: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator); 0 when n = 1.
    pub std: f64,
    pub n: usize,
    /// Set when `n == 1` and `std` is therefore not an estimate.
    pub single_run: bool,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("no values to aggregate".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean,
            std,
            n,
            single_run: n == 1,
        })
    }
}

/// Cross-seed statistics of a homogeneous set of runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: serde_json::Value,
    pub metric: MetricKind,
    pub seeds: Vec<u64>,
    /// Keys: `test_metric`, `best_val_metric`, `mean_abs_cos`,
    /// `mean_signed_cos`, `frac_near_orthogonal` (geometry at the best epoch).
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Mean and sample std of each metric over runs that differ only in seed.
pub fn aggregate(reports: &[RunReport]) -> Result<Aggregate> {
    let first = reports.first().ok_or_else(|| Error::Input("no reports to aggregate".into()))?;
    if let Some(r) = reports.iter().find(|r| r.config != first.config || r.metric != first.metric) {
        return Err(Error::Input(format!("run with seed {} has a different configuration", r.seed)));
    }
    let collect = |f: fn(&RunReport) -> f64| -> Result<MeanStd> { MeanStd::of(&reports.iter().map(f).collect::<Vec<_>>()) };
    let mut metrics = BTreeMap::new();
    metrics.insert("test_metric".into(), collect(|r| r.test_metric)?);
    metrics.insert("best_val_metric".into(), collect(|r| r.best_val_metric)?);
    metrics.insert("mean_abs_cos".into(), collect(|r| r.geometry_best.mean_abs_cos)?);
    metrics.insert("mean_signed_cos".into(), collect(|r| r.geometry_best.mean_signed_cos)?);
    metrics.insert("frac_near_orthogonal".into(), collect(|r| r.geometry_best.frac_near_orthogonal)?);
    Ok(Aggregate {
        config: first.config.clone(),
        metric: first.metric,
        seeds: reports.iter().map(|r| r.seed).collect(),
        metrics,
    })
}

/// One line of an aggregate table.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub method: String,
    pub alpha: f64,
    pub aggregate: Aggregate,
}

pub const AGGREGATE_CSV_HEADER: &str =
    "method,alpha,seed_count,metric_mean,metric_std,mean_abs_cos_mean,mean_signed_cos_mean,frac_near_orthogonal_mean";

/// CSV with the core columns `method, alpha, seed_count, metric_mean,
/// metric_std`, followed by kernel-geometry means.
pub fn write_aggregate_csv(rows: &[AggregateRow], out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "{AGGREGATE_CSV_HEADER}")?;
    for row in rows {
        let m = &row.aggregate.metrics;
        writeln!(
            out,
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            row.method,
            row.alpha,
            row.aggregate.seeds.len(),
            m["test_metric"].mean,
            m["test_metric"].std,
            m["mean_abs_cos"].mean,
            m["mean_signed_cos"].mean,
            m["frac_near_orthogonal"].mean,
        )?;
    }
    Ok(())
}
