//! Nonconformity scores: the cumulative-mass score, the penalized family
//! (separable or marginal-gain linearized), the separable penalized ratio,
//! and the greedy-order score. All of them are pure functions of the
//! probability vector, the candidate label, and the method configuration.

use crate::data::{sort_descending, ProbVector};
use crate::greedy::{greedy_build, GreedyError};
use crate::losses::{CostModel, LossError};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("unknown label {label}, vector has {k}")]
    UnknownLabel { label: usize, k: usize },
    #[error("probability vector has dimension {got}, cost model expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("lambda is {0}; must be finite and >= 0")]
    InvalidLambda(f64),
    #[error("alpha is {0}; must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),
    #[error("the ratio score requires a separable cost model, got {0}")]
    RequiresSeparable(&'static str),
    #[error("penalty for label {label} is zero")]
    ZeroPenalty { label: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Greedy(#[from] GreedyError),
}

/// A nonconformity score family. `Penalized` with `lambda = 0` reduces
/// exactly to `Base`.
#[derive(Debug, Clone)]
pub enum ScoreMethod {
    /// Cumulative probability mass down the sorted vector.
    Base,
    /// Base plus `lambda` times the running cost along the same order.
    Penalized { lambda: f64, cost: Arc<CostModel> },
    /// Probability-to-penalty ratio; a conformity score, negated by the
    /// calibration layer. Hyperparameter-free, separable costs only.
    Ratio { cost: Arc<CostModel> },
    /// Cumulative probability mass along the greedy insertion order, which
    /// adapts to the cost structure. Hyperparameter-free.
    GreedyOrder { cost: Arc<CostModel>, alpha: f64 },
}

impl ScoreMethod {
    pub fn base() -> Self {
        Self::Base
    }

    pub fn penalized(lambda: f64, cost: Arc<CostModel>) -> Result<Self, ScoreError> {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(ScoreError::InvalidLambda(lambda));
        }
        Ok(Self::Penalized { lambda, cost })
    }

    pub fn ratio(cost: Arc<CostModel>) -> Result<Self, ScoreError> {
        if cost.penalties().is_none() {
            return Err(ScoreError::RequiresSeparable(cost.kind_name()));
        }
        Ok(Self::Ratio { cost })
    }

    pub fn greedy_order(cost: Arc<CostModel>, alpha: f64) -> Result<Self, ScoreError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(ScoreError::InvalidAlpha(alpha));
        }
        Ok(Self::GreedyOrder { cost, alpha })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Base => "base",
            Self::Penalized { .. } => "penalized",
            Self::Ratio { .. } => "ratio",
            Self::GreedyOrder { .. } => "greedy",
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            Self::Penalized { lambda, .. } => Some(*lambda),
            _ => None,
        }
    }

    pub fn cost_model(&self) -> Option<&Arc<CostModel>> {
        match self {
            Self::Base => None,
            Self::Penalized { cost, .. } | Self::Ratio { cost } | Self::GreedyOrder { cost, .. } => {
                Some(cost)
            }
        }
    }

    /// True when scores are conformity-oriented (larger = more conforming)
    /// and must be negated before the standard small-score-conforming
    /// split-conformal machinery.
    pub fn is_conformity(&self) -> bool {
        matches!(self, Self::Ratio { .. })
    }

    fn check_dims(&self, p: &ProbVector) -> Result<(), ScoreError> {
        if let Some(cost) = self.cost_model() {
            if cost.k() != p.len() {
                return Err(ScoreError::DimensionMismatch {
                    got: p.len(),
                    expected: cost.k(),
                });
            }
        }
        Ok(())
    }

    /// Scores every label of one instance, along with the insertion order
    /// the construction implies.
    pub fn score_all(&self, p: &ProbVector) -> Result<InstanceScores, ScoreError> {
        self.check_dims(p)?;
        let k = p.len();
        let probs = p.as_slice();
        match self {
            Self::Base => {
                let order = sort_descending(p);
                let mut scores = vec![0.0; k];
                let mut mass = 0.0;
                for &y in &order {
                    mass += probs[y];
                    scores[y] = mass;
                }
                Ok(InstanceScores { scores, order })
            }
            Self::Penalized { lambda, cost } => {
                let order = sort_descending(p);
                let gains = cost.marginal_gains(&order)?;
                let mut scores = vec![0.0; k];
                let mut mass = 0.0;
                let mut running_cost = 0.0;
                for (&y, &gain) in order.iter().zip(&gains) {
                    mass += probs[y];
                    running_cost += gain;
                    scores[y] = mass + lambda * running_cost;
                }
                Ok(InstanceScores { scores, order })
            }
            Self::Ratio { cost } => {
                let penalties = cost
                    .penalties()
                    .expect("ratio methods carry a separable model");
                for (label, &penalty) in penalties.iter().enumerate() {
                    if penalty == 0.0 {
                        return Err(ScoreError::ZeroPenalty { label });
                    }
                }
                let scores: Vec<f64> =
                    (0..k).map(|y| probs[y] / penalties[y]).collect();
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
                Ok(InstanceScores { scores, order })
            }
            Self::GreedyOrder { cost, alpha } => {
                let trace = greedy_build(p, cost, *alpha)?;
                let mut scores = vec![0.0; k];
                for (&y, &mass) in trace.order.iter().zip(&trace.prefix_mass) {
                    scores[y] = mass;
                }
                Ok(InstanceScores {
                    scores,
                    order: trace.order,
                })
            }
        }
    }

    /// Score of a single `(p, y)` pair.
    pub fn score(&self, p: &ProbVector, y: usize) -> Result<f64, ScoreError> {
        if y >= p.len() {
            return Err(ScoreError::UnknownLabel { label: y, k: p.len() });
        }
        Ok(self.score_all(p)?.scores[y])
    }
}

/// Cached per-instance scores for thresholding: one score per label plus the
/// label permutation the score construction implies.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceScores {
    pub scores: Vec<f64>,
    pub order: Vec<usize>,
}

/// Cumulative estimated probability mass down the sorted vector, up to and
/// including `y`. No randomized tie-splitting: the full probability of `y`
/// is always counted.
pub fn aps_rho(p: &ProbVector, y: usize) -> Result<f64, ScoreError> {
    if y >= p.len() {
        return Err(ScoreError::UnknownLabel { label: y, k: p.len() });
    }
    let probs = p.as_slice();
    let mut mass = 0.0;
    for label in sort_descending(p) {
        mass += probs[label];
        if label == y {
            return Ok(mass);
        }
    }
    unreachable!("y is in the permutation");
}
