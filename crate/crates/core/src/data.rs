//! Label spaces, probability vectors, score matrices, and deterministic
//! dataset splits. Everything downstream consumes these types; they are
//! immutable after construction and safe to share across threads.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Probability mass deviations beyond this are treated as a pipeline bug
/// and rejected instead of renormalized.
const REJECT_TOL: f64 = 1e-2;

/// Mass deviations at or below this count as already normalized, which makes
/// renormalization a fixpoint (bit-identical on repeated application).
const NORMALIZED_TOL: f64 = 1e-11;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("label space needs at least 2 labels, got {0}")]
    TooFewLabels(usize),
    #[error("label space has {names} names for {size} labels")]
    NameCountMismatch { names: usize, size: usize },
    #[error("label name {0:?} appears more than once")]
    DuplicateName(String),
    #[error("probability entry {index} is {value}, outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("probabilities sum to {sum}, more than {REJECT_TOL} away from 1")]
    NotNormalized { sum: f64 },
    #[error("probability vector is empty")]
    EmptyProbVector,
    #[error("probability vector has dimension {got}, label space expects {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("label {label} outside [0, {k})")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("duplicate instance id {0:?}")]
    DuplicateInstanceId(String),
    #[error("split fractions ({0}, {1}, {2}) are invalid: each must be >= 0 and they must sum to 1")]
    BadFractions(f64, f64, f64),
    #[error("matrix needs at least {min} instances to split, got {got}")]
    TooFewInstances { min: usize, got: usize },
    #[error("the {0} fold received 0 instances despite a positive fraction")]
    EmptyFold(&'static str),
}

/// A finite label universe of size `K`, optionally with display names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSpace {
    size: usize,
    names: Option<Vec<String>>,
}

impl LabelSpace {
    pub fn new(size: usize) -> Result<Self, DataError> {
        if size < 2 {
            return Err(DataError::TooFewLabels(size));
        }
        Ok(Self { size, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self, DataError> {
        let mut space = Self::new(names.len())?;
        let mut seen = std::collections::HashSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateName(name.clone()));
            }
        }
        space.names = Some(names);
        Ok(space)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn name(&self, label: usize) -> Option<&str> {
        self.names.as_ref().and_then(|n| n.get(label)).map(|s| s.as_str())
    }
}

/// A predicted conditional distribution over labels, renormalized on ingest.
///
/// Inputs may deviate from unit mass by up to 1e-2 (typical model output is
/// within 1e-4); anything worse is rejected. After construction the entries
/// are nonnegative and sum to 1 up to float rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector {
    probs: Vec<f64>,
}

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self, DataError> {
        if probs.is_empty() {
            return Err(DataError::EmptyProbVector);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0 + REJECT_TOL).contains(&value) {
                return Err(DataError::ProbabilityOutOfRange { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > REJECT_TOL {
            return Err(DataError::NotNormalized { sum });
        }
        let mut probs = probs;
        if (sum - 1.0).abs() > NORMALIZED_TOL {
            for p in &mut probs {
                *p /= sum;
            }
        }
        Ok(Self { probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, label: usize) -> Option<f64> {
        self.probs.get(label).copied()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }
}

/// Returns the permutation ordering `p` from greatest to lowest probability,
/// ties broken by ascending label id so thresholds are reproducible.
pub fn sort_descending(p: &ProbVector) -> Vec<usize> {
    let probs = p.as_slice();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}

/// One scored instance: an id, the observed label, and the model's
/// probability vector for it.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub true_label: usize,
    pub probs: ProbVector,
}

/// The sole input from upstream models: per-instance probability vectors
/// with observed labels over a shared label space.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    label_space: LabelSpace,
    instances: Vec<Instance>,
}

impl ScoreMatrix {
    pub fn new(label_space: LabelSpace, instances: Vec<Instance>) -> Result<Self, DataError> {
        let k = label_space.size();
        let mut seen = std::collections::HashSet::new();
        for instance in &instances {
            if instance.probs.len() != k {
                return Err(DataError::DimensionMismatch {
                    got: instance.probs.len(),
                    expected: k,
                });
            }
            if instance.true_label >= k {
                return Err(DataError::LabelOutOfRange {
                    label: instance.true_label,
                    k,
                });
            }
            if !seen.insert(instance.id.as_str()) {
                return Err(DataError::DuplicateInstanceId(instance.id.clone()));
            }
        }
        Ok(Self {
            label_space,
            instances,
        })
    }

    pub fn label_space(&self) -> &LabelSpace {
        &self.label_space
    }

    pub fn k(&self) -> usize {
        self.label_space.size()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }
}

/// Fractions for the (validation, test, calibration) folds plus the shuffle
/// seed. A zero fraction is allowed when the downstream method does not need
/// that fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub validation: f64,
    pub test: f64,
    pub calibration: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(validation: f64, test: f64, calibration: f64, seed: u64) -> Result<Self, DataError> {
        let ok = validation >= 0.0
            && test >= 0.0
            && calibration >= 0.0
            && (validation + test + calibration - 1.0).abs() <= 1e-9;
        if !ok {
            return Err(DataError::BadFractions(validation, test, calibration));
        }
        Ok(Self {
            validation,
            test,
            calibration,
            seed,
        })
    }
}

/// Partitions `matrix` into (validation, test, calibration) folds.
///
/// Validation and test receive `floor(fraction * n)` instances; the
/// remainder goes to calibration, which benefits most from extra samples.
/// The shuffle is a deterministic function of `spec.seed`.
pub fn split(
    matrix: &ScoreMatrix,
    spec: &SplitSpec,
) -> Result<(ScoreMatrix, ScoreMatrix, ScoreMatrix), DataError> {
    let n = matrix.len();
    if n < 3 {
        return Err(DataError::TooFewInstances { min: 3, got: n });
    }
    let n_val = (spec.validation * n as f64).floor() as usize;
    let n_test = (spec.test * n as f64).floor() as usize;
    let n_cal = n - n_val - n_test;
    if spec.validation > 0.0 && n_val == 0 {
        return Err(DataError::EmptyFold("validation"));
    }
    if spec.test > 0.0 && n_test == 0 {
        return Err(DataError::EmptyFold("test"));
    }
    if spec.calibration > 0.0 && n_cal == 0 {
        return Err(DataError::EmptyFold("calibration"));
    }

    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    indices.shuffle(&mut rng);

    let pick = |range: &[usize]| -> Vec<Instance> {
        range
            .iter()
            .map(|&i| matrix.instances()[i].clone())
            .collect()
    };
    let val = pick(&indices[..n_val]);
    let test = pick(&indices[n_val..n_val + n_test]);
    let cal = pick(&indices[n_val + n_test..]);

    Ok((
        ScoreMatrix::new(matrix.label_space().clone(), val)?,
        ScoreMatrix::new(matrix.label_space().clone(), test)?,
        ScoreMatrix::new(matrix.label_space().clone(), cal)?,
    ))
}
