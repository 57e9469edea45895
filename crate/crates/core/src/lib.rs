//! Utility-driven conformal prediction.
//!
//! Given per-instance label-probability vectors from any classifier and a
//! user-specified set cost function, this crate calibrates set-valued
//! predictors that achieve `1 - alpha` marginal coverage with finite-sample
//! guarantees while keeping the expected downstream cost low. Four
//! interchangeable score methods are provided: the cumulative-mass baseline,
//! a penalized family indexed by a tunable weight, the separable penalized
//! ratio, and a greedy-order score for non-separable costs.

pub mod conformal;
pub mod data;
pub mod evaluation;
pub mod greedy;
pub mod hierarchy;
pub mod losses;
pub mod scores;
pub mod synth;

pub use conformal::{calibrate, conformal_quantile, tune_lambda, CalibratedPredictor, TuningResult};
pub use data::{sort_descending, split, Instance, LabelSpace, ProbVector, ScoreMatrix, SplitSpec};
pub use evaluation::{compare_methods, evaluate, median_of_means, EvaluationReport};
pub use greedy::{greedy_build, greedy_set, greedy_set_literal, GreedyTrace};
pub use hierarchy::Hierarchy;
pub use losses::CostModel;
pub use scores::{aps_rho, InstanceScores, ScoreMethod};
pub use synth::{coverage_trial, oracle_optimal_loss, SyntheticTask};
