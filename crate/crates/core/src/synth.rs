//! Synthetic tasks with a known ground-truth conditional distribution, plus
//! brute-force oracles that make the optimality and coverage guarantees
//! checkable at desk scale. A task is a discrete context distribution with
//! one conditional row per context; the emitted classifier output is the
//! true row perturbed by logit-space Gaussian noise scaled by a temperature
//! (zero temperature emits the oracle classifier verbatim).

use crate::conformal::{calibrate, ConformalError};
use crate::data::{Instance, LabelSpace, ProbVector, ScoreMatrix};
use crate::hierarchy::Hierarchy;
use crate::losses::CostModel;
use crate::scores::ScoreMethod;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("task needs at least one context")]
    NoContexts,
    #[error("conditional rows have mixed dimensions")]
    RaggedConditionals,
    #[error("context marginal is invalid (length {len}, sum {sum})")]
    InvalidMarginal { len: usize, sum: f64 },
    #[error("temperature {0} must be finite and >= 0")]
    InvalidTemperature(f64),
    #[error("hierarchy covers {hierarchy} labels, task has {task}")]
    HierarchyMismatch { hierarchy: usize, task: usize },
    #[error("exhaustive oracle limits exceeded: k={k}, contexts={contexts}")]
    TooLarge { k: usize, contexts: usize },
    #[error("the oracle requires a separable cost model, got {0}")]
    RequiresSeparable(&'static str),
    #[error("alpha is {0}; must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),
    #[error("dirichlet concentration {0} must be finite and > 0")]
    InvalidConcentration(f64),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
}

/// A discrete-context generative task standing in for a trained classifier:
/// the true conditional is known per context, so coverage and optimality
/// claims can be verified against exact population quantities.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    label_space: LabelSpace,
    conditionals: Arc<Vec<ProbVector>>,
    marginal: Vec<f64>,
    cumulative_marginal: Vec<f64>,
    temperature: f64,
    hierarchy: Option<Arc<Hierarchy>>,
    seed: u64,
}

impl SyntheticTask {
    pub fn new(
        conditionals: Vec<ProbVector>,
        marginal: Vec<f64>,
        temperature: f64,
        hierarchy: Option<Arc<Hierarchy>>,
        seed: u64,
    ) -> Result<Self, SynthError> {
        if conditionals.is_empty() {
            return Err(SynthError::NoContexts);
        }
        let k = conditionals[0].len();
        if conditionals.iter().any(|row| row.len() != k) {
            return Err(SynthError::RaggedConditionals);
        }
        let sum: f64 = marginal.iter().sum();
        if marginal.len() != conditionals.len()
            || marginal.iter().any(|&w| !w.is_finite() || w < 0.0)
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(SynthError::InvalidMarginal {
                len: marginal.len(),
                sum,
            });
        }
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(SynthError::InvalidTemperature(temperature));
        }
        if let Some(h) = &hierarchy {
            if h.label_count() != k {
                return Err(SynthError::HierarchyMismatch {
                    hierarchy: h.label_count(),
                    task: k,
                });
            }
        }
        let marginal: Vec<f64> = marginal.iter().map(|w| w / sum).collect();
        let mut cumulative_marginal = Vec::with_capacity(marginal.len());
        let mut acc = 0.0;
        for &w in &marginal {
            acc += w;
            cumulative_marginal.push(acc);
        }
        Ok(Self {
            label_space: LabelSpace::new(k)?,
            conditionals: Arc::new(conditionals),
            marginal,
            cumulative_marginal,
            temperature,
            hierarchy,
            seed,
        })
    }

    /// Task with Dirichlet-distributed conditional rows (symmetric
    /// concentration) and a uniform context marginal. Smaller concentration
    /// gives peakier conditionals.
    pub fn dirichlet(
        k: usize,
        contexts: usize,
        concentration: f64,
        temperature: f64,
        seed: u64,
    ) -> Result<Self, SynthError> {
        if !concentration.is_finite() || concentration <= 0.0 {
            return Err(SynthError::InvalidConcentration(concentration));
        }
        if contexts == 0 {
            return Err(SynthError::NoContexts);
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xC04D_1710_4A15_7A5C);
        let gamma = Gamma::new(concentration, 1.0).expect("valid shape");
        let mut conditionals = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            let mut raw: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng).max(1e-12)).collect();
            let total: f64 = raw.iter().sum();
            for value in &mut raw {
                *value /= total;
            }
            conditionals.push(ProbVector::new(raw)?);
        }
        let marginal = vec![1.0 / contexts as f64; contexts];
        Self::new(conditionals, marginal, temperature, None, seed)
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut task = self.clone();
        task.seed = seed;
        task
    }

    pub fn with_temperature(&self, temperature: f64) -> Result<Self, SynthError> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(SynthError::InvalidTemperature(temperature));
        }
        let mut task = self.clone();
        task.temperature = temperature;
        Ok(task)
    }

    pub fn with_hierarchy(&self, hierarchy: Arc<Hierarchy>) -> Result<Self, SynthError> {
        if hierarchy.label_count() != self.k() {
            return Err(SynthError::HierarchyMismatch {
                hierarchy: hierarchy.label_count(),
                task: self.k(),
            });
        }
        let mut task = self.clone();
        task.hierarchy = Some(hierarchy);
        Ok(task)
    }

    pub fn k(&self) -> usize {
        self.label_space.size()
    }

    pub fn context_count(&self) -> usize {
        self.conditionals.len()
    }

    pub fn conditionals(&self) -> &[ProbVector] {
        &self.conditionals
    }

    pub fn marginal(&self) -> &[f64] {
        &self.marginal
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn hierarchy(&self) -> Option<&Arc<Hierarchy>> {
        self.hierarchy.as_ref()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Draws `n` labeled instances i.i.d. from the task, deterministic in
    /// the task seed.
    pub fn generate(&self, n: usize) -> Result<ScoreMatrix, SynthError> {
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed);
        let k = self.k();
        let mut instances = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.random();
            let context = self
                .cumulative_marginal
                .partition_point(|&c| c < u)
                .min(self.context_count() - 1);
            let row = &self.conditionals[context];
            let v: f64 = rng.random();
            let mut acc = 0.0;
            let mut label = k - 1;
            for (y, &p) in row.as_slice().iter().enumerate() {
                acc += p;
                if v < acc {
                    label = y;
                    break;
                }
            }
            let probs = if self.temperature == 0.0 {
                row.clone()
            } else {
                let logits: Vec<f64> = row
                    .as_slice()
                    .iter()
                    .map(|&p| {
                        let noise: f64 = rng.sample(StandardNormal);
                        p.ln() + self.temperature * noise
                    })
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                let total: f64 = exps.iter().sum();
                ProbVector::new(exps.iter().map(|e| e / total).collect())?
            };
            instances.push(Instance {
                id: format!("x{i:06}"),
                true_label: label,
                probs,
            });
        }
        Ok(ScoreMatrix::new(self.label_space.clone(), instances)?)
    }
}

/// Output of the exhaustive oracle: the best expected loss any deterministic
/// set-valued rule with the required coverage can achieve, and the loss of
/// the probability-to-penalty threshold rule for comparison.
#[derive(Debug, Clone, Copy)]
pub struct OracleOptimum {
    pub brute_force_loss: f64,
    pub np_rule_loss: f64,
    pub np_threshold: f64,
    pub np_coverage: f64,
    /// True when the brute force enumerated every subset per context rather
    /// than only ratio-ordered prefixes.
    pub exhaustive: bool,
}

/// Slack for coverage feasibility comparisons; prefix sums of the same atom
/// weights can differ across summation orders by a few ulps.
const COVERAGE_EPS: f64 = 1e-12;

/// Brute-forces the population program: minimize expected set loss over
/// per-context label sets subject to marginal coverage `>= 1 - alpha`,
/// using the task's true conditionals.
///
/// For `k <= 5` every subset per context is enumerated. For `k <= 12` the
/// candidates are restricted to prefixes of the per-context
/// probability-to-penalty order, which is where threshold rules live; the
/// `exhaustive` flag in the result records which path ran.
pub fn oracle_optimal_loss(
    task: &SyntheticTask,
    cost: &CostModel,
    alpha: f64,
) -> Result<OracleOptimum, SynthError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SynthError::InvalidAlpha(alpha));
    }
    let penalties = cost
        .penalties()
        .ok_or(SynthError::RequiresSeparable(cost.kind_name()))?;
    let k = task.k();
    let contexts = task.context_count();
    if contexts > 4 || k > 12 {
        return Err(SynthError::TooLarge { k, contexts });
    }

    // Threshold rule on p(y|x)/penalty(y): choose the largest threshold whose
    // at-or-above set reaches the required mass, then collect per context.
    let mut atoms: Vec<(f64, f64, usize, usize)> = Vec::new(); // (ratio, weight, ctx, label)
    for (ctx, row) in task.conditionals().iter().enumerate() {
        for (label, &p) in row.as_slice().iter().enumerate() {
            let weight = task.marginal()[ctx] * p;
            if weight > 0.0 {
                atoms.push((p / penalties[label], weight, ctx, label));
            }
        }
    }
    atoms.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut np_threshold = f64::NEG_INFINITY;
    let mut cum = 0.0;
    for &(ratio, weight, _, _) in &atoms {
        cum += weight;
        np_threshold = ratio;
        if cum >= 1.0 - alpha - COVERAGE_EPS {
            break;
        }
    }
    let mut np_rule_loss = 0.0;
    let mut np_coverage = 0.0;
    for (ctx, row) in task.conditionals().iter().enumerate() {
        for (label, &p) in row.as_slice().iter().enumerate() {
            if p / penalties[label] >= np_threshold {
                np_rule_loss += task.marginal()[ctx] * penalties[label];
                np_coverage += task.marginal()[ctx] * p;
            }
        }
    }

    let required = 1.0 - alpha - COVERAGE_EPS;
    let brute_force_loss;
    let exhaustive = k <= 5;
    if exhaustive {
        // (coverage, loss) per candidate subset, per context.
        let masks = 1usize << k;
        let loss_of_mask: Vec<f64> = (0..masks)
            .map(|mask| {
                (0..k)
                    .filter(|y| mask >> y & 1 == 1)
                    .map(|y| penalties[y])
                    .sum()
            })
            .collect();
        let per_context: Vec<Vec<(f64, f64)>> = (0..contexts)
            .map(|ctx| {
                let row = task.conditionals()[ctx].as_slice();
                let w = task.marginal()[ctx];
                (0..masks)
                    .map(|mask| {
                        let mass: f64 =
                            (0..k).filter(|&y| mask >> y & 1 == 1).map(|y| row[y]).sum();
                        (w * mass, w * loss_of_mask[mask])
                    })
                    .collect()
            })
            .collect();
        brute_force_loss = enumerate_min(&per_context, required);
    } else {
        // Ratio-prefix candidates only.
        let per_context: Vec<Vec<(f64, f64)>> = (0..contexts)
            .map(|ctx| {
                let row = task.conditionals()[ctx].as_slice();
                let w = task.marginal()[ctx];
                let mut order: Vec<usize> = (0..k).collect();
                order.sort_by(|&a, &b| {
                    (row[b] / penalties[b])
                        .total_cmp(&(row[a] / penalties[a]))
                        .then(a.cmp(&b))
                });
                let mut candidates = Vec::with_capacity(k + 1);
                let mut mass = 0.0;
                let mut loss = 0.0;
                candidates.push((0.0, 0.0));
                for &y in &order {
                    mass += row[y];
                    loss += penalties[y];
                    candidates.push((w * mass, w * loss));
                }
                candidates
            })
            .collect();
        brute_force_loss = enumerate_min(&per_context, required);
    }

    Ok(OracleOptimum {
        brute_force_loss,
        np_rule_loss,
        np_threshold,
        np_coverage,
        exhaustive,
    })
}

/// Minimum total loss over one candidate choice per context subject to the
/// summed coverage requirement. Prunes branches that already exceed the
/// incumbent loss.
fn enumerate_min(per_context: &[Vec<(f64, f64)>], required: f64) -> f64 {
    fn walk(
        per_context: &[Vec<(f64, f64)>],
        depth: usize,
        coverage: f64,
        loss: f64,
        required: f64,
        best: &mut f64,
    ) {
        if loss >= *best {
            return;
        }
        if depth == per_context.len() {
            if coverage >= required {
                *best = loss;
            }
            return;
        }
        for &(c, l) in &per_context[depth] {
            walk(per_context, depth + 1, coverage + c, loss + l, required, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(per_context, 0, 0.0, 0.0, required, &mut best);
    best
}

/// Repeats generate/calibrate/evaluate with per-trial seeds and returns the
/// mean coverage plus the per-trial coverages. Trials run in parallel; the
/// per-trial seeds are drawn up front so the output is deterministic.
pub fn coverage_trial(
    task: &SyntheticTask,
    method: &ScoreMethod,
    n_cal: usize,
    n_test: usize,
    trials: usize,
    alpha: f64,
) -> Result<(f64, Vec<f64>), SynthError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(SynthError::InvalidAlpha(alpha));
    }
    let mut seeder = ChaCha12Rng::seed_from_u64(task.seed);
    let seeds: Vec<u64> = (0..trials).map(|_| seeder.random()).collect();
    let coverages: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| -> Result<f64, SynthError> {
            let trial_task = task.with_seed(seed);
            let matrix = trial_task.generate(n_cal + n_test)?;
            let space = matrix.label_space().clone();
            let mut instances = matrix.instances().to_vec();
            let test_part = instances.split_off(n_cal);
            let cal = ScoreMatrix::new(space.clone(), instances)?;
            let test = ScoreMatrix::new(space, test_part)?;
            let predictor = calibrate(method, &cal, alpha)?;
            let mut covered = 0usize;
            for instance in test.instances() {
                let set = predictor.predict_set(&instance.probs)?;
                if set.binary_search(&instance.true_label).is_ok() {
                    covered += 1;
                }
            }
            Ok(covered as f64 / test.len() as f64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mean = coverages.iter().sum::<f64>() / coverages.len().max(1) as f64;
    Ok((mean, coverages))
}

/// Builds a temperature-zero task whose coverage constraint is exactly
/// attainable by a probability-to-penalty threshold rule: the level
/// `1 - alpha` is placed on an atom boundary of the ratio distribution, with
/// distinct ratios at the cut. In that regime the threshold rule is optimal
/// among deterministic rules, so oracle comparisons are exact.
///
/// Returns the task, its separable cost model, and the constructed alpha.
pub fn np_aligned_task(
    k: usize,
    contexts: usize,
    seed: u64,
) -> Result<(SyntheticTask, CostModel, f64), SynthError> {
    let mut attempt = 0u64;
    loop {
        let task_seed = seed.wrapping_add(attempt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        attempt += 1;
        let mut rng = ChaCha12Rng::seed_from_u64(task_seed ^ 0xA119_4ED0);
        let penalties: Vec<f64> = (0..k)
            .map(|_| 0.25 * rng.random_range(1..=4) as f64)
            .collect();
        let cost = CostModel::separable(penalties.clone()).expect("positive penalties");

        let gamma = Gamma::new(1.0, 1.0).expect("valid shape");
        let mut conditionals = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            let raw: Vec<f64> = (0..k)
                .map(|_| f64::max(gamma.sample(&mut rng), 1e-9))
                .collect();
            let total: f64 = raw.iter().sum();
            conditionals.push(ProbVector::new(raw.iter().map(|v| v / total).collect())?);
        }
        let raw_marginal: Vec<f64> = (0..contexts).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = raw_marginal.iter().sum();
        let marginal: Vec<f64> = raw_marginal.iter().map(|w| w / total).collect();

        let mut atoms: Vec<(f64, f64)> = Vec::new();
        for (ctx, row) in conditionals.iter().enumerate() {
            for (label, &p) in row.as_slice().iter().enumerate() {
                atoms.push((p / penalties[label], marginal[ctx] * p));
            }
        }
        atoms.sort_by(|a, b| b.0.total_cmp(&a.0));

        // Cut somewhere in the middle of the atom list, away from ties.
        let lo = atoms.len() / 3;
        let hi = atoms.len() - 2;
        let cut = rng.random_range(lo..=hi);
        if atoms[cut].0 == atoms[cut + 1].0 {
            continue;
        }
        let mass_at_cut: f64 = atoms[..=cut].iter().map(|a| a.1).sum();
        let alpha = 1.0 - mass_at_cut;
        if !(0.02..=0.6).contains(&alpha) {
            continue;
        }
        let task = SyntheticTask::new(conditionals, marginal, 0.0, None, task_seed)?;
        return Ok((task, cost, alpha));
    }
}

/// Deterministic benchmark tasks for the verification suites and the bench
/// command. There is no canonical public benchmark for this problem, so the
/// shapes below are artifact choices, sized so that desk-scale runs separate
/// the methods cleanly.
pub mod benchmark {
    use super::*;

    /// Labels in the separable benchmark.
    pub const SEPARABLE_K: usize = 50;
    /// Cheap head labels carrying the peaked contexts.
    const SEPARABLE_HEAD: usize = 15;
    /// Fraction of contexts that are diffuse over the expensive tail.
    const DIFFUSE_FRACTION: f64 = 0.2;
    /// Labels in the hierarchical benchmark.
    pub const HIERARCHICAL_K: usize = 20;

    /// Per-label penalties drawn uniformly from {0.25, 0.5, 0.75, 1.0}.
    pub fn random_penalties(k: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..k)
            .map(|_| 0.25 * rng.random_range(1..=4) as f64)
            .collect()
    }

    /// Two-population separable benchmark over 50 labels: most contexts are
    /// sharply peaked on a cheap 15-label head, a minority are diffuse over
    /// the expensive 35-label tail. The cost structure mirrors the context
    /// structure, which is what gives cost-aware methods room to reallocate
    /// coverage away from expensive instances.
    pub fn separable_task(
        contexts: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<(SyntheticTask, Arc<CostModel>), SynthError> {
        let k = SEPARABLE_K;
        let head = SEPARABLE_HEAD;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let penalties: Vec<f64> = (0..k)
            .map(|y| {
                if y < head {
                    0.25 * rng.random_range(1..=2) as f64
                } else {
                    0.25 * rng.random_range(3..=4) as f64
                }
            })
            .collect();
        let cost = Arc::new(CostModel::separable(penalties).expect("positive penalties"));

        let peaked = Gamma::new(0.05, 1.0).expect("valid shape");
        let diffuse = Gamma::new(5.0, 1.0).expect("valid shape");
        let mut conditionals = Vec::with_capacity(contexts);
        for _ in 0..contexts {
            let mut raw = vec![1e-9; k];
            if rng.random::<f64>() < DIFFUSE_FRACTION {
                for slot in raw.iter_mut().skip(head) {
                    *slot = f64::max(diffuse.sample(&mut rng), 1e-12);
                }
            } else {
                for slot in raw.iter_mut().take(head) {
                    *slot = f64::max(peaked.sample(&mut rng), 1e-12);
                }
            }
            let total: f64 = raw.iter().sum();
            conditionals.push(ProbVector::new(raw.iter().map(|v| v / total).collect())?);
        }
        let marginal = vec![1.0 / contexts as f64; contexts];
        let task = SyntheticTask::new(conditionals, marginal, temperature, None, seed)?;
        Ok((task, cost))
    }

    /// Hierarchical benchmark over 20 labels grouped five-per-branch under a
    /// balanced tree, with the category-coverage cost at the branch level.
    pub fn hierarchical_task(
        contexts: usize,
        temperature: f64,
        seed: u64,
    ) -> Result<(SyntheticTask, Arc<CostModel>), SynthError> {
        let hierarchy =
            Arc::new(Hierarchy::balanced(HIERARCHICAL_K, 5).expect("valid parameters"));
        let cost = Arc::new(CostModel::coverage(&hierarchy));
        let task = SyntheticTask::dirichlet(HIERARCHICAL_K, contexts, 0.3, temperature, seed)?
            .with_hierarchy(hierarchy)?;
        Ok((task, cost))
    }
}
