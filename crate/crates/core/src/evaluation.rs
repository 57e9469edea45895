//! Evaluation protocol: marginal coverage, conditional coverage by set-size
//! bucket, loss statistics with median-of-means aggregation across runs, and
//! the set-size adaptivity curve.

use crate::conformal::{CalibratedPredictor, ConformalError};
use crate::data::ScoreMatrix;
use crate::losses::{CostModel, LossError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTest,
    #[error("empty input")]
    EmptyInput,
    #[error("no reports for baseline method {0:?}")]
    MissingBaseline(String),
    #[error("reports are incompatible: {0}")]
    IncompatibleReports(String),
    #[error("set size {size} matches no bucket")]
    BucketGap { size: usize },
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// An inclusive set-size range with a display label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SizeBucket {
    pub label: String,
    pub min: usize,
    pub max: usize,
}

impl SizeBucket {
    fn new(label: &str, min: usize, max: usize) -> Self {
        Self {
            label: label.to_string(),
            min,
            max,
        }
    }
}

/// The fixed bucket rows used in reports; override for label spaces where
/// these ranges are a poor fit.
pub fn default_buckets() -> Vec<SizeBucket> {
    vec![
        SizeBucket::new("1", 1, 1),
        SizeBucket::new("2 to 4", 2, 4),
        SizeBucket::new("5 to 9", 5, 9),
        SizeBucket::new("10 to 49", 10, 49),
        SizeBucket::new("50 to 99", 50, 99),
        SizeBucket::new("100+", 100, usize::MAX),
    ]
}

/// One rendered bucket: how many test instances landed in the size range and
/// the coverage among them (undefined for empty buckets).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BucketRow {
    pub label: String,
    pub count: usize,
    pub coverage: Option<f64>,
}

/// One adaptivity point: the mean (and spread of the) true-label probability
/// among instances that received this set size.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AdaptivityPoint {
    pub set_size: usize,
    pub mean_true_prob: f64,
    pub std_true_prob: f64,
}

/// Per-run evaluation of one calibrated predictor on one test fold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvaluationReport {
    pub method_name: String,
    pub alpha: f64,
    pub n_test: usize,
    pub coverage: f64,
    pub mean_loss: f64,
    pub mean_set_size: f64,
    pub bucket_rows: Vec<BucketRow>,
    pub adaptivity: Vec<AdaptivityPoint>,
    pub run_seed: u64,
    pub cost_digest: String,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Human-readable aligned table.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("method: {}\n", self.method_name));
        out.push_str(&format!("alpha: {:.4}\n", self.alpha));
        out.push_str(&format!("n_test: {}\n", self.n_test));
        out.push_str(&format!("coverage: {:.4}\n", self.coverage));
        out.push_str(&format!("mean_loss: {:.4}\n", self.mean_loss));
        out.push_str(&format!("mean_set_size: {:.4}\n", self.mean_set_size));
        out.push_str(&format!("run_seed: {}\n", self.run_seed));
        out.push_str(&format!("cost: {}\n", self.cost_digest));
        out.push('\n');
        out.push_str(&format!("{:<10}  {:>7}  {:>8}\n", "size", "count", "coverage"));
        for row in &self.bucket_rows {
            let coverage = match row.coverage {
                Some(c) => format!("{c:.4}"),
                None => "–".to_string(),
            };
            out.push_str(&format!(
                "{:<10}  {:>7}  {:>8}\n",
                row.label, row.count, coverage
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{:<10}  {:>14}  {:>8}\n",
            "set_size", "mean_true_prob", "std"
        ));
        for point in &self.adaptivity {
            out.push_str(&format!(
                "{:<10}  {:>14.4}  {:>8.4}\n",
                point.set_size, point.mean_true_prob, point.std_true_prob
            ));
        }
        out
    }
}

/// Evaluates a predictor on a test fold under the paper-style bucket rows.
pub fn evaluate(
    predictor: &CalibratedPredictor,
    test: &ScoreMatrix,
    cost: &CostModel,
    run_seed: u64,
) -> Result<EvaluationReport, EvalError> {
    evaluate_with_buckets(predictor, test, cost, run_seed, &default_buckets())
}

/// As [`evaluate`], with caller-supplied set-size buckets. An instance with
/// an empty prediction set is counted in an extra leading `0` row, emitted
/// only when such sets actually occur.
pub fn evaluate_with_buckets(
    predictor: &CalibratedPredictor,
    test: &ScoreMatrix,
    cost: &CostModel,
    run_seed: u64,
    buckets: &[SizeBucket],
) -> Result<EvaluationReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTest);
    }
    let n = test.len();
    let mut covered_total = 0usize;
    let mut loss_total = 0.0;
    let mut size_total = 0usize;
    let mut bucket_counts = vec![0usize; buckets.len()];
    let mut bucket_covered = vec![0usize; buckets.len()];
    let mut empty_count = 0usize;
    let mut by_size: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();

    for instance in test.instances() {
        let set = predictor.predict_set(&instance.probs)?;
        let covered = set.binary_search(&instance.true_label).is_ok();
        let size = set.len();
        covered_total += covered as usize;
        loss_total += cost.set_loss(&set)?;
        size_total += size;
        by_size
            .entry(size)
            .or_default()
            .push(instance.probs.get(instance.true_label).unwrap());
        if size == 0 {
            empty_count += 1;
            continue;
        }
        let slot = buckets
            .iter()
            .position(|b| size >= b.min && size <= b.max)
            .ok_or(EvalError::BucketGap { size })?;
        bucket_counts[slot] += 1;
        bucket_covered[slot] += covered as usize;
    }

    let mut bucket_rows = Vec::with_capacity(buckets.len() + 1);
    if empty_count > 0 {
        // Empty sets never cover, by definition.
        bucket_rows.push(BucketRow {
            label: "0".to_string(),
            count: empty_count,
            coverage: Some(0.0),
        });
    }
    for (i, bucket) in buckets.iter().enumerate() {
        bucket_rows.push(BucketRow {
            label: bucket.label.clone(),
            count: bucket_counts[i],
            coverage: if bucket_counts[i] > 0 {
                Some(bucket_covered[i] as f64 / bucket_counts[i] as f64)
            } else {
                None
            },
        });
    }

    let adaptivity = by_size
        .into_iter()
        .map(|(set_size, probs)| {
            let m = probs.len() as f64;
            let mean = probs.iter().sum::<f64>() / m;
            let variance = probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / m;
            AdaptivityPoint {
                set_size,
                mean_true_prob: mean,
                std_true_prob: variance.sqrt(),
            }
        })
        .collect();

    Ok(EvaluationReport {
        method_name: predictor.method().name().to_string(),
        alpha: predictor.alpha(),
        n_test: n,
        coverage: covered_total as f64 / n as f64,
        mean_loss: loss_total / n as f64,
        mean_set_size: size_total as f64 / n as f64,
        bucket_rows,
        adaptivity,
        run_seed,
        cost_digest: cost.digest(),
    })
}

/// Exact median of per-run means; even-length inputs average the two central
/// values.
pub fn median_of_means(per_run_means: &[f64]) -> Result<f64, EvalError> {
    if per_run_means.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut sorted = per_run_means.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    })
}

/// One method's aggregate across runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub runs: usize,
    pub median_loss: f64,
    pub std_loss: f64,
    pub reduction_vs_baseline: f64,
}

/// Cross-method comparison table keyed to a baseline method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<12}  {:>4}  {:>12}  {:>8}  {:>12}\n",
            "method", "runs", "median_loss", "std", "reduction"
        ));
        for row in &self.rows {
            out.push_str(&format!(
                "{:<12}  {:>4}  {:>12.4}  {:>8.4}  {:>12.4}\n",
                row.method, row.runs, row.median_loss, row.std_loss, row.reduction_vs_baseline
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }

    pub fn row(&self, method: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.method == method)
    }
}

/// Aggregates per-run reports into a method comparison: median-of-means loss,
/// std across runs, and relative reduction against the baseline method's
/// median. All reports must share the alpha level and cost model.
pub fn compare_methods(
    reports: &[EvaluationReport],
    baseline_name: &str,
) -> Result<ComparisonTable, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let alpha = reports[0].alpha;
    let digest = &reports[0].cost_digest;
    for report in reports {
        if report.alpha != alpha {
            return Err(EvalError::IncompatibleReports(format!(
                "alpha {} vs {}",
                report.alpha, alpha
            )));
        }
        if &report.cost_digest != digest {
            return Err(EvalError::IncompatibleReports(format!(
                "cost digest {} vs {}",
                report.cost_digest, digest
            )));
        }
    }

    let mut order: Vec<&str> = Vec::new();
    for report in reports {
        if !order.contains(&report.method_name.as_str()) {
            order.push(&report.method_name);
        }
    }
    if !order.contains(&baseline_name) {
        return Err(EvalError::MissingBaseline(baseline_name.to_string()));
    }

    let losses_of = |method: &str| -> Vec<f64> {
        reports
            .iter()
            .filter(|r| r.method_name == method)
            .map(|r| r.mean_loss)
            .collect()
    };
    let baseline_median = median_of_means(&losses_of(baseline_name))?;

    let mut rows = Vec::new();
    for method in order {
        let losses = losses_of(method);
        let median = median_of_means(&losses)?;
        let std = if losses.len() > 1 {
            let mean = losses.iter().sum::<f64>() / losses.len() as f64;
            (losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>()
                / (losses.len() - 1) as f64)
                .sqrt()
        } else {
            0.0
        };
        let reduction = if baseline_median == 0.0 {
            0.0
        } else {
            1.0 - median / baseline_median
        };
        rows.push(ComparisonRow {
            method: method.to_string(),
            runs: losses.len(),
            median_loss: median,
            std_loss: std,
            reduction_vs_baseline: reduction,
        });
    }
    Ok(ComparisonTable {
        baseline: baseline_name.to_string(),
        rows,
    })
}

/// Spearman rank correlation with average ranks on ties. Returns 0 when
/// either side is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx).powi(2);
        vy += (b - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut indexed: Vec<(usize, f64)> = values.iter().copied().enumerate().collect();
    indexed.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < indexed.len() {
        let mut j = i;
        while j + 1 < indexed.len() && indexed[j + 1].1 == indexed[i].1 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for item in &indexed[i..=j] {
            ranks[item.0] = avg;
        }
        i = j + 1;
    }
    ranks
}
