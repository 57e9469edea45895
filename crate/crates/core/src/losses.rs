//! Set cost functions: separable penalty sums, hierarchy max-distance, and
//! category coverage, plus the marginal-gain linearization that turns any of
//! them into a per-label running total along an insertion order.

use crate::hierarchy::Hierarchy;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("penalty for label {label} is {value}; penalties must be positive and finite")]
    NonPositivePenalty { label: usize, value: f64 },
    #[error("no penalties given")]
    EmptyPenalties,
    #[error("no categories given")]
    EmptyCategories,
    #[error("unknown label {label}, label space has {k}")]
    UnknownLabel { label: usize, k: usize },
    #[error("label {label} appears twice in the order")]
    DuplicateLabel { label: usize },
    #[error("bound {given} is below the tight bound {required}; overrides may only raise it")]
    BoundTooSmall { given: f64, required: f64 },
}

/// A set cost over the label space, with a declared upper bound `M` used by
/// the greedy selection rule.
#[derive(Debug, Clone)]
pub enum CostModel {
    /// `L(S) = sum of per-label penalties`; bound defaults to the full sum.
    Separable { penalties: Vec<f64>, bound: f64 },
    /// `L(S) = max pairwise tree distance in S` (0 for |S| <= 1); bound
    /// defaults to the hierarchy diameter.
    MaxDistance { hierarchy: Arc<Hierarchy>, bound: f64 },
    /// `L(S) = number of categories S intersects`; bound defaults to the
    /// category count. Categories may overlap.
    Coverage {
        k: usize,
        categories: Vec<Vec<usize>>,
        /// For each label, the indices of the categories containing it.
        memberships: Vec<Vec<usize>>,
        bound: f64,
    },
}

impl CostModel {
    pub fn separable(penalties: Vec<f64>) -> Result<Self, LossError> {
        if penalties.is_empty() {
            return Err(LossError::EmptyPenalties);
        }
        for (label, &value) in penalties.iter().enumerate() {
            if !value.is_finite() || value <= 0.0 {
                return Err(LossError::NonPositivePenalty { label, value });
            }
        }
        let bound = penalties.iter().sum();
        Ok(Self::Separable { penalties, bound })
    }

    pub fn max_distance(hierarchy: Arc<Hierarchy>) -> Self {
        let bound = hierarchy.diameter() as f64;
        Self::MaxDistance { hierarchy, bound }
    }

    pub fn coverage(hierarchy: &Hierarchy) -> Self {
        let categories = hierarchy.categories();
        Self::coverage_from_categories(hierarchy.label_count(), categories)
            .expect("hierarchy categories are valid")
    }

    pub fn coverage_from_categories(
        k: usize,
        categories: Vec<Vec<usize>>,
    ) -> Result<Self, LossError> {
        if categories.is_empty() {
            return Err(LossError::EmptyCategories);
        }
        let mut memberships = vec![Vec::new(); k];
        for (index, category) in categories.iter().enumerate() {
            for &label in category {
                if label >= k {
                    return Err(LossError::UnknownLabel { label, k });
                }
                memberships[label].push(index);
            }
        }
        let bound = categories.len() as f64;
        Ok(Self::Coverage {
            k,
            categories,
            memberships,
            bound,
        })
    }

    /// Raises the declared bound `M`. The tight default may only be raised,
    /// never lowered.
    pub fn with_bound(mut self, m: f64) -> Result<Self, LossError> {
        let required = self.bound();
        if m < required {
            return Err(LossError::BoundTooSmall { given: m, required });
        }
        match &mut self {
            Self::Separable { bound, .. }
            | Self::MaxDistance { bound, .. }
            | Self::Coverage { bound, .. } => *bound = m,
        }
        Ok(self)
    }

    pub fn k(&self) -> usize {
        match self {
            Self::Separable { penalties, .. } => penalties.len(),
            Self::MaxDistance { hierarchy, .. } => hierarchy.label_count(),
            Self::Coverage { k, .. } => *k,
        }
    }

    pub fn bound(&self) -> f64 {
        match self {
            Self::Separable { bound, .. }
            | Self::MaxDistance { bound, .. }
            | Self::Coverage { bound, .. } => *bound,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Self::Separable { .. } => "separable",
            Self::MaxDistance { .. } => "max_distance",
            Self::Coverage { .. } => "coverage",
        }
    }

    pub fn penalties(&self) -> Option<&[f64]> {
        match self {
            Self::Separable { penalties, .. } => Some(penalties),
            _ => None,
        }
    }

    pub fn categories(&self) -> Option<&[Vec<usize>]> {
        match self {
            Self::Coverage { categories, .. } => Some(categories),
            _ => None,
        }
    }

    fn check_labels(&self, set: &[usize]) -> Result<(), LossError> {
        let k = self.k();
        for &label in set {
            if label >= k {
                return Err(LossError::UnknownLabel { label, k });
            }
        }
        Ok(())
    }

    /// Evaluates the set loss directly from its definition. `L(empty) = 0`
    /// for every kind.
    pub fn set_loss(&self, set: &[usize]) -> Result<f64, LossError> {
        self.check_labels(set)?;
        match self {
            Self::Separable { penalties, .. } => {
                Ok(set.iter().map(|&y| penalties[y]).sum())
            }
            Self::MaxDistance { hierarchy, .. } => {
                if set.len() < 2 {
                    return Ok(0.0);
                }
                let k = hierarchy.label_count();
                let table = hierarchy.distance_table();
                let mut max = 0u32;
                for (i, &a) in set.iter().enumerate() {
                    for &b in &set[i + 1..] {
                        max = max.max(table[a * k + b]);
                    }
                }
                Ok(max as f64)
            }
            Self::Coverage {
                categories,
                memberships,
                ..
            } => {
                let mut touched = vec![false; categories.len()];
                let mut count = 0usize;
                for &label in set {
                    for &c in &memberships[label] {
                        if !touched[c] {
                            touched[c] = true;
                            count += 1;
                        }
                    }
                }
                Ok(count as f64)
            }
        }
    }

    /// Marginal gains `L(S_i) - L(S_{i-1})` for the prefix sets of `order`.
    /// Prefix sums telescope back to the set loss of each prefix.
    pub fn marginal_gains(&self, order: &[usize]) -> Result<Vec<f64>, LossError> {
        self.check_labels(order)?;
        let mut seen = vec![false; self.k()];
        for &label in order {
            if seen[label] {
                return Err(LossError::DuplicateLabel { label });
            }
            seen[label] = true;
        }
        let mut incremental = IncrementalLoss::new(self);
        Ok(order
            .iter()
            .map(|&label| {
                let gain = incremental.gain(label);
                incremental.push(label);
                gain
            })
            .collect())
    }

    /// Reports whether the model behaved separably on a sampled collection
    /// of sets and label orders: per-label marginal gains must not depend
    /// on insertion order. A coverage model with any multi-label category
    /// is rejected outright via the constructive witness
    /// `L(C) = 1 != |C| * L({y})`.
    pub fn is_separable_witness(&self) -> bool {
        match self {
            Self::Separable { .. } => true,
            Self::Coverage { categories, .. } => {
                if categories.iter().any(|c| c.len() >= 2) {
                    return false;
                }
                self.sampled_order_independence()
            }
            Self::MaxDistance { .. } => self.sampled_order_independence(),
        }
    }

    fn sampled_order_independence(&self) -> bool {
        let k = self.k();
        let mut rng = ChaCha12Rng::seed_from_u64(0x5E9A_8A17_D15E_A5E0);
        let labels: Vec<usize> = (0..k).collect();
        for _ in 0..64 {
            let size = rng.random_range(2..=k.min(8));
            let mut set = labels.clone();
            set.shuffle(&mut rng);
            set.truncate(size);
            let mut reference = vec![f64::NAN; k];
            for &label in &set {
                reference[label] = self.set_loss(&[label]).expect("valid label");
            }
            for _ in 0..3 {
                set.shuffle(&mut rng);
                let gains = self.marginal_gains(&set).expect("duplicate-free");
                for (&label, &gain) in set.iter().zip(&gains) {
                    if (gain - reference[label]).abs() > 1e-12 {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Stable digest of the model's semantics, embedded in serialized
    /// predictors to catch cost-model mismatches at load time.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.kind_name().as_bytes());
        hasher.update(self.k().to_le_bytes());
        hasher.update(self.bound().to_bits().to_le_bytes());
        match self {
            Self::Separable { penalties, .. } => {
                for p in penalties {
                    hasher.update(p.to_bits().to_le_bytes());
                }
            }
            Self::MaxDistance { hierarchy, .. } => {
                for &p in hierarchy.parent_table() {
                    hasher.update(p.to_le_bytes());
                }
                for &leaf in hierarchy.leaf_table() {
                    hasher.update(leaf.to_le_bytes());
                }
            }
            Self::Coverage { categories, .. } => {
                for category in categories {
                    hasher.update(category.len().to_le_bytes());
                    for &label in category {
                        hasher.update(label.to_le_bytes());
                    }
                }
            }
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Running set-loss state supporting O(1)-ish marginal-gain queries; the
/// greedy optimizer evaluates every candidate at every step, so this is the
/// hot path.
pub struct IncrementalLoss<'a> {
    model: &'a CostModel,
    current: f64,
    state: IncrementalState,
}

enum IncrementalState {
    Separable,
    /// `max_to_set[y]` = max distance from y to any member added so far.
    MaxDistance { max_to_set: Vec<u32> },
    Coverage { covered: Vec<bool> },
}

impl<'a> IncrementalLoss<'a> {
    pub fn new(model: &'a CostModel) -> Self {
        let state = match model {
            CostModel::Separable { .. } => IncrementalState::Separable,
            CostModel::MaxDistance { .. } => IncrementalState::MaxDistance {
                max_to_set: vec![0; model.k()],
            },
            CostModel::Coverage { categories, .. } => IncrementalState::Coverage {
                covered: vec![false; categories.len()],
            },
        };
        Self {
            model,
            current: 0.0,
            state,
        }
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    /// `L(S + {label}) - L(S)` without mutating the state.
    pub fn gain(&self, label: usize) -> f64 {
        match (&self.state, self.model) {
            (IncrementalState::Separable, CostModel::Separable { penalties, .. }) => {
                penalties[label]
            }
            (IncrementalState::MaxDistance { max_to_set }, CostModel::MaxDistance { .. }) => {
                (max_to_set[label] as f64 - self.current).max(0.0)
            }
            (IncrementalState::Coverage { covered }, CostModel::Coverage { memberships, .. }) => {
                memberships[label]
                    .iter()
                    .filter(|&&c| !covered[c])
                    .count() as f64
            }
            _ => unreachable!("state constructed from the same model"),
        }
    }

    pub fn push(&mut self, label: usize) {
        self.current += self.gain(label);
        match (&mut self.state, self.model) {
            (IncrementalState::Separable, _) => {}
            (
                IncrementalState::MaxDistance { max_to_set },
                CostModel::MaxDistance { hierarchy, .. },
            ) => {
                let k = hierarchy.label_count();
                let table = hierarchy.distance_table();
                for y in 0..k {
                    max_to_set[y] = max_to_set[y].max(table[label * k + y]);
                }
            }
            (IncrementalState::Coverage { covered }, CostModel::Coverage { memberships, .. }) => {
                for &c in &memberships[label] {
                    covered[c] = true;
                }
            }
            _ => unreachable!("state constructed from the same model"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::seq::SliceRandom;

    fn star(k: usize) -> Arc<Hierarchy> {
        let mut names = vec!["root".to_string()];
        names.extend((0..k).map(|i| format!("leaf{i}")));
        let mut parent = vec![0usize];
        parent.extend(std::iter::repeat_n(0, k));
        Arc::new(Hierarchy::new(names, parent, (1..=k).collect()).unwrap())
    }

    #[test]
    fn separable_loss_sums_penalties() {
        let m = CostModel::separable(vec![0.25, 0.5, 0.75]).unwrap();
        assert_eq!(m.set_loss(&[0, 2]).unwrap(), 1.0);
        assert_eq!(m.set_loss(&[]).unwrap(), 0.0);
        assert_eq!(m.bound(), 1.5);
    }

    #[test]
    fn coverage_loss_counts_intersected_categories() {
        let m = CostModel::coverage_from_categories(4, vec![vec![0, 1], vec![2, 3]]).unwrap();
        assert_eq!(m.set_loss(&[0, 2]).unwrap(), 2.0);
        assert_eq!(m.set_loss(&[0, 1]).unwrap(), 1.0);
        assert_eq!(m.set_loss(&[]).unwrap(), 0.0);
    }

    #[test]
    fn max_distance_loss_is_zero_on_singletons() {
        let m = CostModel::max_distance(star(4));
        assert_eq!(m.set_loss(&[2]).unwrap(), 0.0);
        assert_eq!(m.set_loss(&[0, 3]).unwrap(), 2.0);
    }

    #[test]
    fn marginal_gains_match_prefix_losses_directly() {
        // Coverage example: second label adds no new category.
        let m = CostModel::coverage_from_categories(3, vec![vec![0, 1], vec![2]]).unwrap();
        assert_eq!(m.marginal_gains(&[0, 1, 2]).unwrap(), vec![1.0, 0.0, 1.0]);

        // Max distance on a star tree.
        let m = CostModel::max_distance(star(3));
        assert_eq!(m.marginal_gains(&[0, 1, 2]).unwrap(), vec![0.0, 2.0, 0.0]);

        // Separable gains equal the penalties in order, any order.
        let m = CostModel::separable(vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.marginal_gains(&[2, 0, 1]).unwrap(), vec![0.3, 0.1, 0.2]);
    }

    #[test]
    fn marginal_gains_reject_duplicates() {
        let m = CostModel::separable(vec![0.1, 0.2]).unwrap();
        assert!(matches!(
            m.marginal_gains(&[0, 0]),
            Err(LossError::DuplicateLabel { label: 0 })
        ));
    }

    #[test]
    fn telescoping_holds_for_random_orders() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let models = [
            CostModel::separable(vec![0.25, 0.5, 0.75, 1.0, 0.25, 0.5]).unwrap(),
            CostModel::max_distance(Arc::new(Hierarchy::balanced(6, 2).unwrap())),
            CostModel::coverage(&Hierarchy::balanced(6, 2).unwrap()),
        ];
        for model in &models {
            for _ in 0..50 {
                let mut order: Vec<usize> = (0..model.k()).collect();
                order.shuffle(&mut rng);
                let gains = model.marginal_gains(&order).unwrap();
                let mut prefix_sum = 0.0;
                for (i, gain) in gains.iter().enumerate() {
                    prefix_sum += gain;
                    let direct = model.set_loss(&order[..=i]).unwrap();
                    assert!(
                        (prefix_sum - direct).abs() < 1e-12,
                        "{} prefix {i}",
                        model.kind_name()
                    );
                }
                assert!((prefix_sum - model.set_loss(&order).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn losses_are_monotone_and_bounded() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let hierarchy = Hierarchy::balanced(10, 2).unwrap();
        let models = [
            CostModel::separable((0..10).map(|i| 0.25 * (1 + i % 4) as f64).collect()).unwrap(),
            CostModel::max_distance(Arc::new(Hierarchy::balanced(10, 2).unwrap())),
            CostModel::coverage(&hierarchy),
        ];
        for model in &models {
            for _ in 0..10_000 {
                let mut set: Vec<usize> =
                    (0..10).filter(|_| rng.random_bool(0.4)).collect();
                let with = model.set_loss(&set).unwrap();
                assert!(with <= model.bound() + 1e-12, "{}", model.kind_name());
                if let Some(dropped) = set.pop() {
                    let without = model.set_loss(&set).unwrap();
                    assert!(without <= with + 1e-12, "dropped {dropped}");
                }
            }
        }
    }

    #[test]
    fn separable_loss_is_additive_over_disjoint_unions() {
        let m = CostModel::separable(vec![0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let a = [0usize, 2];
        let b = [1usize, 4];
        let both = [0usize, 2, 1, 4];
        let sum = m.set_loss(&a).unwrap() + m.set_loss(&b).unwrap();
        assert!((m.set_loss(&both).unwrap() - sum).abs() < 1e-12);
    }

    #[test]
    fn separability_witness_matches_structure() {
        let separable = CostModel::separable(vec![0.5, 0.5, 1.0]).unwrap();
        assert!(separable.is_separable_witness());

        let coverage =
            CostModel::coverage_from_categories(3, vec![vec![0, 1], vec![2]]).unwrap();
        assert!(!coverage.is_separable_witness());

        let singleton_cats =
            CostModel::coverage_from_categories(4, vec![vec![0], vec![1], vec![2], vec![3]])
                .unwrap();
        assert!(singleton_cats.is_separable_witness());

        let max_dist = CostModel::max_distance(star(4));
        assert!(!max_dist.is_separable_witness());
    }

    #[test]
    fn singleton_categories_are_exhaustively_additive() {
        // Oracle for the witness: every subset of a singleton-category model
        // decomposes exactly, checked over all 2^k subsets.
        let k = 8;
        let m = CostModel::coverage_from_categories(k, (0..k).map(|i| vec![i]).collect()).unwrap();
        for mask in 0u32..(1 << k) {
            let set: Vec<usize> = (0..k).filter(|&i| mask >> i & 1 == 1).collect();
            let direct = m.set_loss(&set).unwrap();
            let additive: f64 = set
                .iter()
                .map(|&y| m.set_loss(&[y]).unwrap())
                .sum();
            assert_eq!(direct, additive);
        }
    }

    #[test]
    fn bound_override_only_raises() {
        let m = CostModel::separable(vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            m.clone().with_bound(0.5),
            Err(LossError::BoundTooSmall { .. })
        ));
        assert_eq!(m.with_bound(2.0).unwrap().bound(), 2.0);
    }

    #[test]
    fn digest_distinguishes_models() {
        let a = CostModel::separable(vec![0.5, 0.5]).unwrap();
        let b = CostModel::separable(vec![0.5, 0.25]).unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), CostModel::separable(vec![0.5, 0.5]).unwrap().digest());
    }
}
