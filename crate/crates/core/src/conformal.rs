//! Split-conformal calibration: the finite-sample quantile, threshold-based
//! set construction for every score method, and the three-fold tuning
//! pipeline for the penalized family.

use crate::data::{ProbVector, ScoreMatrix};
use crate::losses::{CostModel, LossError};
use crate::scores::{ScoreError, ScoreMethod};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("alpha is {0}; must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),
    #[error("calibration scores contain a non-finite value")]
    NonFiniteScore,
    #[error("the {0} fold is empty")]
    EmptyFold(&'static str),
    #[error("the tuning grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("predictor record is malformed: {0}")]
    MalformedRecord(String),
    #[error("predictor was calibrated against cost model {expected}, got {got}")]
    CostDigestMismatch { expected: String, got: String },
    #[error("predictor record references a {0} cost model but none was supplied")]
    MissingCostModel(&'static str),
}

/// Exact `ceil((n + 1) * (1 - alpha))` computed without double-rounding
/// drift: uses `ceil(A * (1 - a)) = A - floor(A * a)` with an error-free
/// product so quantile indices land on the mathematically correct integer.
fn quantile_rank(n: usize, alpha: f64) -> usize {
    let a = (n + 1) as f64;
    let product = a * alpha;
    let residual = a.mul_add(alpha, -product);
    let whole = product.floor();
    let fraction = (product - whole) + residual;
    let floor_a_alpha = if fraction >= 1.0 {
        whole + 1.0
    } else if fraction < 0.0 {
        whole - 1.0
    } else {
        whole
    };
    (a - floor_a_alpha) as usize
}

/// The `ceil((n+1)(1-alpha))`-th smallest score, or +inf when that rank
/// exceeds `n` (the calibration set is too small for the requested level,
/// and the full label set is the only coverage-safe answer).
pub fn conformal_quantile(scores: &[f64], alpha: f64) -> Result<f64, ConformalError> {
    if scores.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(ConformalError::InvalidAlpha(alpha));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(ConformalError::NonFiniteScore);
    }
    let n = scores.len();
    let rank = quantile_rank(n, alpha);
    if rank > n {
        return Ok(f64::INFINITY);
    }
    let mut sorted = scores.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(sorted[rank - 1])
}

/// A score method with its calibrated threshold.
#[derive(Debug, Clone)]
pub struct CalibratedPredictor {
    method: ScoreMethod,
    threshold: f64,
    alpha: f64,
    calibration_size: usize,
    negated: bool,
}

impl CalibratedPredictor {
    pub fn method(&self) -> &ScoreMethod {
        &self.method
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn calibration_size(&self) -> usize {
        self.calibration_size
    }

    pub fn negated(&self) -> bool {
        self.negated
    }

    /// Labels whose nonconformity score is at or below the threshold. With
    /// a +inf threshold every label is returned.
    pub fn predict_set(&self, p: &ProbVector) -> Result<Vec<usize>, ConformalError> {
        let instance = self.method.score_all(p)?;
        let set = instance
            .scores
            .iter()
            .enumerate()
            .filter(|(_, &score)| {
                let s = if self.negated { -score } else { score };
                s <= self.threshold
            })
            .map(|(label, _)| label)
            .collect();
        Ok(set)
    }

    /// Versioned flat text record. Floats use the shortest round-trip
    /// representation, so parsing restores them bit-exactly.
    pub fn to_record(&self) -> String {
        let mut out = String::from("ucp-predictor-v1\n");
        out.push_str(&format!("method={}\n", self.method.name()));
        if let Some(lambda) = self.method.lambda() {
            out.push_str(&format!("lambda={lambda}\n"));
        }
        if let ScoreMethod::GreedyOrder { alpha, .. } = &self.method {
            out.push_str(&format!("greedy_alpha={alpha}\n"));
        }
        out.push_str(&format!("alpha={}\n", self.alpha));
        out.push_str(&format!("n={}\n", self.calibration_size));
        out.push_str(&format!("threshold={}\n", self.threshold));
        out.push_str(&format!("negated={}\n", self.negated));
        match self.method.cost_model() {
            Some(cost) => out.push_str(&format!("cost={}:{}\n", cost.kind_name(), cost.digest())),
            None => out.push_str("cost=none\n"),
        }
        out
    }

    /// Parses a record produced by [`to_record`]. Methods that reference a
    /// cost model require the same model to be supplied; the embedded digest
    /// guards against silently evaluating under a different cost.
    pub fn from_record(
        record: &str,
        cost: Option<Arc<CostModel>>,
    ) -> Result<Self, ConformalError> {
        let malformed = |msg: &str| ConformalError::MalformedRecord(msg.to_string());
        let mut lines = record.lines();
        match lines.next() {
            Some("ucp-predictor-v1") => {}
            other => {
                return Err(malformed(&format!(
                    "expected header ucp-predictor-v1, got {other:?}"
                )))
            }
        }
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| malformed(&format!("line {line:?} is not key=value")))?;
            fields.insert(key.to_string(), value.to_string());
        }
        let take = |key: &str| -> Result<String, ConformalError> {
            fields
                .get(key)
                .cloned()
                .ok_or_else(|| malformed(&format!("missing field {key}")))
        };
        let parse_f64 = |key: &str| -> Result<f64, ConformalError> {
            take(key)?
                .parse::<f64>()
                .map_err(|e| malformed(&format!("field {key}: {e}")))
        };

        let method_name = take("method")?;
        let alpha = parse_f64("alpha")?;
        let calibration_size = take("n")?
            .parse::<usize>()
            .map_err(|e| malformed(&format!("field n: {e}")))?;
        let threshold = parse_f64("threshold")?;
        let negated = take("negated")? == "true";

        let cost_field = take("cost")?;
        let method = match method_name.as_str() {
            "base" => {
                if cost_field != "none" {
                    return Err(malformed("base predictor with a cost reference"));
                }
                ScoreMethod::base()
            }
            name => {
                let cost = cost.ok_or(ConformalError::MissingCostModel(match name {
                    "penalized" => "penalized",
                    "ratio" => "ratio",
                    _ => "greedy",
                }))?;
                let expected = cost_field
                    .split_once(':')
                    .map(|(_, digest)| digest.to_string())
                    .ok_or_else(|| malformed("cost field is not kind:digest"))?;
                let got = cost.digest();
                if got != expected {
                    return Err(ConformalError::CostDigestMismatch { expected, got });
                }
                match name {
                    "penalized" => ScoreMethod::penalized(parse_f64("lambda")?, cost)?,
                    "ratio" => ScoreMethod::ratio(cost)?,
                    "greedy" => ScoreMethod::greedy_order(cost, parse_f64("greedy_alpha")?)?,
                    other => return Err(malformed(&format!("unknown method {other}"))),
                }
            }
        };

        Ok(Self {
            method,
            threshold,
            alpha,
            calibration_size,
            negated,
        })
    }
}

/// Scores every calibration pair with the method (negating conformity
/// scores) and thresholds at the finite-sample quantile.
pub fn calibrate(
    method: &ScoreMethod,
    cal: &ScoreMatrix,
    alpha: f64,
) -> Result<CalibratedPredictor, ConformalError> {
    if cal.is_empty() {
        return Err(ConformalError::EmptyCalibration);
    }
    let negated = method.is_conformity();
    let mut scores = Vec::with_capacity(cal.len());
    for instance in cal.instances() {
        let s = method.score(&instance.probs, instance.true_label)?;
        scores.push(if negated { -s } else { s });
    }
    let threshold = conformal_quantile(&scores, alpha)?;
    Ok(CalibratedPredictor {
        method: method.clone(),
        threshold,
        alpha,
        calibration_size: cal.len(),
        negated,
    })
}

/// Outcome of the three-fold tuning pipeline: the per-grid-point test
/// losses, the winner, and a predictor recalibrated on the fresh fold.
#[derive(Debug, Clone)]
pub struct TuningResult {
    pub grid: Vec<f64>,
    pub per_lambda_loss: Vec<(f64, f64)>,
    pub chosen_lambda: f64,
    pub final_predictor: CalibratedPredictor,
}

/// Grid search for the penalty weight: calibrate on `val`, pick the grid
/// point with the lowest mean test loss (ties go to the smaller value, which
/// stays closest to the plain coverage-efficient score), then recalibrate on
/// the disjoint `cal` fold so the coverage guarantee survives the
/// data-dependent selection.
pub fn tune_lambda(
    cost: Arc<CostModel>,
    grid: &[f64],
    val: &ScoreMatrix,
    test: &ScoreMatrix,
    cal: &ScoreMatrix,
    alpha: f64,
) -> Result<TuningResult, ConformalError> {
    if grid.is_empty() {
        return Err(ConformalError::EmptyGrid);
    }
    if val.is_empty() {
        return Err(ConformalError::EmptyFold("validation"));
    }
    if test.is_empty() {
        return Err(ConformalError::EmptyFold("test"));
    }
    if cal.is_empty() {
        return Err(ConformalError::EmptyFold("calibration"));
    }

    let mut per_lambda_loss = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let method = ScoreMethod::penalized(lambda, cost.clone())?;
        let predictor = calibrate(&method, val, alpha)?;
        let mut total = 0.0;
        for instance in test.instances() {
            let set = predictor.predict_set(&instance.probs)?;
            total += cost.set_loss(&set)?;
        }
        per_lambda_loss.push((lambda, total / test.len() as f64));
    }

    let mut chosen_lambda = f64::INFINITY;
    let mut best_loss = f64::INFINITY;
    for &(lambda, loss) in &per_lambda_loss {
        if loss < best_loss || (loss == best_loss && lambda < chosen_lambda) {
            best_loss = loss;
            chosen_lambda = lambda;
        }
    }

    let final_method = ScoreMethod::penalized(chosen_lambda, cost)?;
    let final_predictor = calibrate(&final_method, cal, alpha)?;
    Ok(TuningResult {
        grid: grid.to_vec(),
        per_lambda_loss,
        chosen_lambda,
        final_predictor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Instance, LabelSpace, ProbVector, ScoreMatrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn matrix_from(rows: Vec<(usize, Vec<f64>)>) -> ScoreMatrix {
        let k = rows[0].1.len();
        let instances = rows
            .into_iter()
            .enumerate()
            .map(|(i, (label, probs))| Instance {
                id: format!("x{i:04}"),
                true_label: label,
                probs: ProbVector::new(probs).unwrap(),
            })
            .collect();
        ScoreMatrix::new(LabelSpace::new(k).unwrap(), instances).unwrap()
    }

    /// Brute-force oracle: smallest t among the scores with #{s <= t} >= rank.
    fn quantile_oracle(scores: &[f64], alpha: f64) -> f64 {
        let n = scores.len();
        let rank = super::quantile_rank(n, alpha);
        if rank > n {
            return f64::INFINITY;
        }
        let mut best = f64::INFINITY;
        for &t in scores {
            let count = scores.iter().filter(|&&s| s <= t).count();
            if count >= rank && t < best {
                best = t;
            }
        }
        best
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 9.0);
        assert_eq!(conformal_quantile(&scores, 0.05).unwrap(), f64::INFINITY);
        let scores: Vec<f64> = (1..=99).map(|v| v as f64).collect();
        assert_eq!(conformal_quantile(&scores, 0.1).unwrap(), 90.0);
        assert_eq!(
            conformal_quantile(&scores, 0.1).unwrap(),
            quantile_oracle(&scores, 0.1)
        );
    }

    #[test]
    fn quantile_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..2000 {
            let n = rng.random_range(1..40);
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let alpha = rng.random_range(0.01..0.99);
            assert_eq!(
                conformal_quantile(&scores, alpha).unwrap(),
                quantile_oracle(&scores, alpha),
                "n={n} alpha={alpha}"
            );
        }
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(matches!(
            conformal_quantile(&[], 0.1),
            Err(ConformalError::EmptyCalibration)
        ));
        assert!(matches!(
            conformal_quantile(&[1.0], 0.0),
            Err(ConformalError::InvalidAlpha(_))
        ));
        assert!(matches!(
            conformal_quantile(&[f64::NAN], 0.1),
            Err(ConformalError::NonFiniteScore)
        ));
    }

    #[test]
    fn single_instance_calibration_yields_infinite_threshold() {
        let cal = matrix_from(vec![(0, vec![0.9, 0.1])]);
        let predictor = calibrate(&ScoreMethod::base(), &cal, 0.1).unwrap();
        assert_eq!(predictor.threshold(), f64::INFINITY);
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(predictor.predict_set(&p).unwrap(), vec![0, 1]);
    }

    #[test]
    fn confident_calibration_gives_small_sets() {
        // True label always carries the top probability, >= 0.95, with the
        // remainder on a single runner-up.
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        let k = 5;
        let rows: Vec<(usize, Vec<f64>)> = (0..200)
            .map(|_| {
                let label = rng.random_range(0..k);
                let top = rng.random_range(0.95..0.99);
                let mut probs = vec![0.0; k];
                probs[label] = top;
                probs[(label + 1) % k] = 1.0 - top;
                (label, probs)
            })
            .collect();
        let cal = matrix_from(rows);
        let expected = {
            let scores: Vec<f64> = cal
                .instances()
                .iter()
                .map(|i| ScoreMethod::base().score(&i.probs, i.true_label).unwrap())
                .collect();
            quantile_oracle(&scores, 0.1)
        };
        let predictor = calibrate(&ScoreMethod::base(), &cal, 0.1).unwrap();
        assert_eq!(predictor.threshold(), expected);
        assert!(predictor.threshold() >= 0.95);
        let mut probs = vec![0.0; k];
        probs[2] = 0.97;
        probs[3] = 0.03;
        let set = predictor
            .predict_set(&ProbVector::new(probs).unwrap())
            .unwrap();
        assert_eq!(set, vec![2]);
    }

    #[test]
    fn base_predict_set_thresholds_cumulative_scores() {
        let cal = matrix_from(vec![
            (0, vec![0.8, 0.1, 0.1]),
            (0, vec![0.8, 0.15, 0.05]),
            (1, vec![0.2, 0.75, 0.05]),
        ]);
        let mut predictor = calibrate(&ScoreMethod::base(), &cal, 0.1).unwrap();
        predictor.threshold = 0.8;
        let p = ProbVector::new(vec![0.5, 0.3, 0.2]).unwrap();
        assert_eq!(predictor.predict_set(&p).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ratio_negation_realizes_the_ge_threshold_form() {
        let cost = Arc::new(CostModel::separable(vec![1.0, 1.0]).unwrap());
        let method = ScoreMethod::ratio(cost).unwrap();
        let cal = matrix_from(vec![
            (0, vec![0.5, 0.5]),
            (0, vec![0.6, 0.4]),
            (1, vec![0.3, 0.7]),
        ]);
        let mut predictor = calibrate(&method, &cal, 0.1).unwrap();
        assert!(predictor.negated());
        predictor.threshold = -0.5;
        // Now the set should be exactly {y : p[y] >= 0.5}.
        let p = ProbVector::new(vec![0.55, 0.45]).unwrap();
        assert_eq!(predictor.predict_set(&p).unwrap(), vec![0]);
        let p = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(predictor.predict_set(&p).unwrap(), vec![0, 1]);
    }

    #[test]
    fn raising_the_threshold_never_removes_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let cal = matrix_from(
            (0..50)
                .map(|_| {
                    let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    (
                        rng.random_range(0..4),
                        raw.iter().map(|v| v / total).collect(),
                    )
                })
                .collect(),
        );
        let predictor = calibrate(&ScoreMethod::base(), &cal, 0.2).unwrap();
        for _ in 0..50 {
            let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.05..1.0)).collect();
            let total: f64 = raw.iter().sum();
            let p = ProbVector::new(raw.iter().map(|v| v / total).collect()).unwrap();
            let tight = predictor.predict_set(&p).unwrap();
            let mut looser = predictor.clone();
            looser.threshold = predictor.threshold() + 0.07;
            let wide = looser.predict_set(&p).unwrap();
            assert!(tight.iter().all(|y| wide.contains(y)));
        }
    }

    #[test]
    fn lambda_zero_and_base_calibrate_identically() {
        let cal = matrix_from(vec![
            (0, vec![0.7, 0.2, 0.1]),
            (1, vec![0.3, 0.6, 0.1]),
            (2, vec![0.2, 0.2, 0.6]),
            (0, vec![0.5, 0.25, 0.25]),
        ]);
        let cost = Arc::new(CostModel::separable(vec![0.25, 0.5, 1.0]).unwrap());
        let base = calibrate(&ScoreMethod::base(), &cal, 0.1).unwrap();
        let zero = calibrate(&ScoreMethod::penalized(0.0, cost).unwrap(), &cal, 0.1).unwrap();
        assert_eq!(base.threshold(), zero.threshold());
    }

    #[test]
    fn tuning_grid_of_zero_reduces_to_base() {
        let cal = matrix_from(vec![
            (0, vec![0.7, 0.2, 0.1]),
            (1, vec![0.3, 0.6, 0.1]),
            (2, vec![0.2, 0.2, 0.6]),
        ]);
        let cost = Arc::new(CostModel::separable(vec![0.25, 0.5, 1.0]).unwrap());
        let result = tune_lambda(cost, &[0.0], &cal, &cal, &cal, 0.1).unwrap();
        assert_eq!(result.chosen_lambda, 0.0);
        let base = calibrate(&ScoreMethod::base(), &cal, 0.1).unwrap();
        assert_eq!(result.final_predictor.threshold(), base.threshold());
    }

    #[test]
    fn tuning_ties_break_toward_smaller_lambda() {
        // A calibration set where every instance is fully confident, so all
        // lambda values give identical sets and losses.
        let rows: Vec<(usize, Vec<f64>)> = (0..12).map(|i| {
            let mut p = vec![0.0, 0.0, 0.0];
            p[i % 3] = 1.0;
            (i % 3, p)
        }).collect();
        let m = matrix_from(rows);
        let cost = Arc::new(CostModel::separable(vec![1.0, 1.0, 1.0]).unwrap());
        let result = tune_lambda(cost, &[0.5, 0.1, 2.0], &m, &m, &m, 0.1).unwrap();
        assert_eq!(result.chosen_lambda, 0.1);
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let cost = Arc::new(CostModel::separable(vec![0.3, 0.7, 0.25]).unwrap());
        let cal = matrix_from(vec![
            (0, vec![0.7, 0.2, 0.1]),
            (1, vec![0.3, 0.6, 0.1]),
            (2, vec![0.2, 0.2, 0.6]),
        ]);
        for method in [
            ScoreMethod::base(),
            ScoreMethod::penalized(0.1, cost.clone()).unwrap(),
            ScoreMethod::ratio(cost.clone()).unwrap(),
            ScoreMethod::greedy_order(cost.clone(), 0.1).unwrap(),
        ] {
            let predictor = calibrate(&method, &cal, 0.1).unwrap();
            let record = predictor.to_record();
            let restored = CalibratedPredictor::from_record(
                &record,
                match method {
                    ScoreMethod::Base => None,
                    _ => Some(cost.clone()),
                },
            )
            .unwrap();
            assert_eq!(restored.threshold().to_bits(), predictor.threshold().to_bits());
            assert_eq!(restored.alpha().to_bits(), predictor.alpha().to_bits());
            assert_eq!(restored.calibration_size(), predictor.calibration_size());
            assert_eq!(restored.negated(), predictor.negated());
            assert_eq!(restored.method().name(), predictor.method().name());
        }
    }

    #[test]
    fn record_rejects_wrong_cost_model() {
        let cost = Arc::new(CostModel::separable(vec![0.3, 0.7]).unwrap());
        let other = Arc::new(CostModel::separable(vec![0.4, 0.6]).unwrap());
        let cal = matrix_from(vec![(0, vec![0.7, 0.3]), (1, vec![0.4, 0.6])]);
        let predictor =
            calibrate(&ScoreMethod::ratio(cost).unwrap(), &cal, 0.1).unwrap();
        let record = predictor.to_record();
        let err = CalibratedPredictor::from_record(&record, Some(other));
        assert!(matches!(err, Err(ConformalError::CostDigestMismatch { .. })));
        let err = CalibratedPredictor::from_record(&record, None);
        assert!(matches!(err, Err(ConformalError::MissingCostModel(_))));
    }
}
