//! Run configuration: a single TOML file with experiment-level defaults.
//! Command-line flags override individual keys; precedence is flag, then
//! config file, then the built-in default.

use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::error::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::runs")]
    pub runs: usize,
    /// Methods the bench command compares. When absent, a default set is
    /// chosen to fit the cost model kind.
    #[serde(default)]
    pub methods: Option<Vec<String>>,
    #[serde(default = "defaults::lambda_grid")]
    pub lambda_grid: Vec<f64>,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub task: Option<TaskConfig>,
    #[serde(default)]
    pub cost: Option<CostConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub validation: f64,
    pub test: f64,
    pub calibration: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            validation: 0.5,
            test: 0.25,
            calibration: 0.25,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Score CSV consumed by bench when no synthetic task is configured.
    pub scores: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// "dirichlet", "separable_benchmark", or "hierarchical_benchmark".
    pub kind: String,
    #[serde(default = "defaults::labels")]
    pub labels: usize,
    #[serde(default = "defaults::contexts")]
    pub contexts: usize,
    #[serde(default = "defaults::concentration")]
    pub concentration: f64,
    #[serde(default = "defaults::temperature")]
    pub temperature: f64,
    /// Instances drawn per run by `bench`, and the default for `synth`.
    #[serde(default = "defaults::samples")]
    pub samples: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// "separable", "max_distance", or "coverage".
    pub kind: String,
    /// Separable: a penalty CSV path, or "random" for seeded draws from
    /// {0.25, 0.5, 0.75, 1.0}.
    #[serde(default)]
    pub penalties: Option<String>,
    /// Hierarchy CSV path, or "balanced" for a generated uniform tree.
    #[serde(default)]
    pub hierarchy: Option<String>,
    /// Branching factor for a generated balanced hierarchy.
    #[serde(default = "defaults::branching")]
    pub branching: usize,
    /// Coverage only: explicit category CSV overriding the hierarchy-derived
    /// categories.
    #[serde(default)]
    pub categories: Option<PathBuf>,
    /// Optional upward override of the loss bound.
    #[serde(default)]
    pub bound: Option<f64>,
}

mod defaults {
    pub fn alpha() -> f64 {
        0.1
    }
    pub fn runs() -> usize {
        10
    }
    pub fn lambda_grid() -> Vec<f64> {
        vec![0.001, 0.01, 0.1, 1.0, 10.0]
    }
    pub fn labels() -> usize {
        20
    }
    pub fn contexts() -> usize {
        500
    }
    pub fn concentration() -> f64 {
        0.3
    }
    pub fn temperature() -> f64 {
        0.5
    }
    pub fn samples() -> usize {
        6000
    }
    pub fn branching() -> usize {
        5
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(Self::default_config()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Data(format!("cannot read config {}: {e}", path.display()))
                })?;
                let config: RunConfig = toml::from_str(&text).map_err(|e| {
                    CliError::Data(format!("config {}: {e}", path.display()))
                })?;
                config.validate()?;
                Ok(config)
            }
        }
    }

    pub fn default_config() -> Self {
        toml::from_str("").expect("empty config deserializes from defaults")
    }

    fn validate(&self) -> Result<(), CliError> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(CliError::Data(format!(
                "alpha {} must lie strictly inside (0, 1)",
                self.alpha
            )));
        }
        if self.lambda_grid.iter().any(|&l| !l.is_finite() || l < 0.0) {
            return Err(CliError::Data(format!(
                "lambda grid {:?} must be finite and nonnegative",
                self.lambda_grid
            )));
        }
        if let Some(task) = &self.task {
            match task.kind.as_str() {
                "dirichlet" | "separable_benchmark" | "hierarchical_benchmark" => {}
                other => {
                    return Err(CliError::Data(format!(
                        "unknown task kind {other:?}; expected dirichlet, separable_benchmark, or hierarchical_benchmark"
                    )))
                }
            }
        }
        if let Some(cost) = &self.cost {
            match cost.kind.as_str() {
                "separable" | "max_distance" | "coverage" => {}
                other => {
                    return Err(CliError::Data(format!(
                        "unknown cost kind {other:?}; expected separable, max_distance, or coverage"
                    )))
                }
            }
        }
        Ok(())
    }
}
