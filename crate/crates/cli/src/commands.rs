//! Subcommand implementations. Every command is deterministic given the
//! config and seed, and all outputs go through atomic writes.

use crate::config::{RunConfig, TaskConfig};
use crate::error::CliError;
use crate::formats;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use ucp_core::conformal::{calibrate, tune_lambda, CalibratedPredictor};
use ucp_core::data::{split, ScoreMatrix, SplitSpec};
use ucp_core::evaluation::{compare_methods, evaluate, EvaluationReport};
use ucp_core::hierarchy::Hierarchy;
use ucp_core::losses::CostModel;
use ucp_core::scores::ScoreMethod;
use ucp_core::synth::{benchmark, coverage_trial, np_aligned_task, oracle_optimal_loss, SyntheticTask};

/// A configured synthetic task plus the cost model bundled with it, when the
/// task kind defines one.
struct ResolvedTask {
    task: SyntheticTask,
    bundled_cost: Option<Arc<CostModel>>,
    samples: usize,
}

fn build_task(config: &RunConfig) -> Result<Option<ResolvedTask>, CliError> {
    let Some(task_config) = &config.task else {
        return Ok(None);
    };
    let TaskConfig {
        kind,
        labels,
        contexts,
        concentration,
        temperature,
        samples,
    } = task_config.clone();
    let seed = config.seed;
    let resolved = match kind.as_str() {
        "dirichlet" => ResolvedTask {
            task: SyntheticTask::dirichlet(labels, contexts, concentration, temperature, seed)
                .map_err(|e| CliError::data("task", e))?,
            bundled_cost: None,
            samples,
        },
        "separable_benchmark" => {
            let (task, cost) = benchmark::separable_task(contexts, temperature, seed)
                .map_err(|e| CliError::data("task", e))?;
            ResolvedTask {
                task,
                bundled_cost: Some(cost),
                samples,
            }
        }
        "hierarchical_benchmark" => {
            let (task, cost) = benchmark::hierarchical_task(contexts, temperature, seed)
                .map_err(|e| CliError::data("task", e))?;
            ResolvedTask {
                task,
                bundled_cost: Some(cost),
                samples,
            }
        }
        other => return Err(CliError::Data(format!("unknown task kind {other:?}"))),
    };
    Ok(Some(resolved))
}

/// Builds the cost model for a `k`-label space. An explicit `[cost]` stanza
/// wins; otherwise a benchmark task's bundled model is used.
fn resolve_cost(
    config: &RunConfig,
    k: usize,
    bundled: Option<Arc<CostModel>>,
) -> Result<Option<Arc<CostModel>>, CliError> {
    let Some(cost_config) = &config.cost else {
        if let Some(bundled) = bundled {
            if bundled.k() != k {
                return Err(CliError::Data(format!(
                    "task cost model covers {} labels, data has {k}",
                    bundled.k()
                )));
            }
            return Ok(Some(bundled));
        }
        return Ok(None);
    };

    let data_err = |context: &str, e: formats::FormatError| CliError::data(context, e);
    let model = match cost_config.kind.as_str() {
        "separable" => {
            let penalties = match cost_config.penalties.as_deref() {
                Some("random") | None => benchmark::random_penalties(k, config.seed ^ 0x9E37),
                Some(path) => formats::load_costs(Path::new(path), k)
                    .map_err(|e| data_err("cost table", e))?,
            };
            CostModel::separable(penalties).map_err(|e| CliError::data("cost model", e))?
        }
        kind @ ("max_distance" | "coverage") => {
            let hierarchy = match cost_config.hierarchy.as_deref() {
                Some("balanced") | None => Arc::new(
                    Hierarchy::balanced(k, cost_config.branching)
                        .map_err(|e| CliError::data("balanced hierarchy", e))?,
                ),
                Some(path) => {
                    let h = formats::load_hierarchy(Path::new(path))
                        .map_err(|e| data_err("hierarchy", e))?;
                    if h.label_count() != k {
                        return Err(CliError::Data(format!(
                            "hierarchy covers {} labels, data has {k}",
                            h.label_count()
                        )));
                    }
                    Arc::new(h)
                }
            };
            if kind == "max_distance" {
                CostModel::max_distance(hierarchy)
            } else if let Some(categories_path) = &cost_config.categories {
                let categories = formats::load_categories(categories_path, k)
                    .map_err(|e| data_err("categories", e))?;
                CostModel::coverage_from_categories(k, categories)
                    .map_err(|e| CliError::data("categories", e))?
            } else {
                CostModel::coverage(&hierarchy)
            }
        }
        other => return Err(CliError::Data(format!("unknown cost kind {other:?}"))),
    };
    let model = match cost_config.bound {
        Some(bound) => model
            .with_bound(bound)
            .map_err(|e| CliError::data("cost bound", e))?,
        None => model,
    };
    Ok(Some(Arc::new(model)))
}

fn require_cost(
    cost: Option<Arc<CostModel>>,
    what: &str,
) -> Result<Arc<CostModel>, CliError> {
    cost.ok_or_else(|| {
        CliError::Usage(format!(
            "{what} needs a cost model; add a [cost] stanza or use a benchmark task"
        ))
    })
}

fn build_method(
    name: &str,
    cost: Option<Arc<CostModel>>,
    lambda: Option<f64>,
    alpha: f64,
) -> Result<ScoreMethod, CliError> {
    match name {
        "base" => Ok(ScoreMethod::base()),
        "penalized" => {
            let lambda = lambda.ok_or_else(|| {
                CliError::Usage(
                    "the penalized method needs --lambda (or use tune for grid selection)".into(),
                )
            })?;
            ScoreMethod::penalized(lambda, require_cost(cost, "penalized")?)
                .map_err(|e| CliError::data("penalized method", e))
        }
        "ratio" => ScoreMethod::ratio(require_cost(cost, "ratio")?)
            .map_err(|e| CliError::data("ratio method", e)),
        "greedy" => ScoreMethod::greedy_order(require_cost(cost, "greedy")?, alpha)
            .map_err(|e| CliError::data("greedy method", e)),
        other => Err(CliError::Usage(format!(
            "unknown method {other:?}; expected base, penalized, ratio, or greedy"
        ))),
    }
}

fn load_scores(path: &Path) -> Result<ScoreMatrix, CliError> {
    formats::load_scores(path).map_err(|e| CliError::Data(e.to_string()))
}

fn split_spec(config: &RunConfig, seed: u64) -> Result<SplitSpec, CliError> {
    SplitSpec::new(
        config.split.validation,
        config.split.test,
        config.split.calibration,
        seed,
    )
    .map_err(|e| CliError::data("split", e))
}

pub fn cmd_synth(
    config: &RunConfig,
    out: &Path,
    n: Option<usize>,
    hierarchy_out: Option<&Path>,
    costs_out: Option<&Path>,
) -> Result<(), CliError> {
    let resolved = build_task(config)?
        .ok_or_else(|| CliError::Usage("synth needs a [task] stanza in the config".into()))?;
    let n = n.unwrap_or(resolved.samples);
    if n == 0 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    let matrix = resolved
        .task
        .generate(n)
        .map_err(|e| CliError::data("generate", e))?;
    formats::write_scores(out, &matrix).map_err(|e| CliError::Data(e.to_string()))?;
    println!("wrote {n} instances over {} labels to {}", matrix.k(), out.display());

    if let Some(path) = hierarchy_out {
        let hierarchy = resolved
            .task
            .hierarchy()
            .ok_or_else(|| CliError::Usage("this task kind has no hierarchy to write".into()))?;
        formats::write_hierarchy(path, hierarchy).map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote hierarchy to {}", path.display());
    }
    if let Some(path) = costs_out {
        let cost = resolve_cost(config, matrix.k(), resolved.bundled_cost.clone())?;
        let cost = require_cost(cost, "writing a cost table")?;
        let penalties = cost.penalties().ok_or_else(|| {
            CliError::Usage("only separable cost models serialize to a penalty table".into())
        })?;
        formats::write_costs(path, penalties).map_err(|e| CliError::Data(e.to_string()))?;
        println!("wrote penalty table to {}", path.display());
    }
    Ok(())
}

pub fn cmd_calibrate(
    config: &RunConfig,
    scores: &Path,
    out: &Path,
    method_name: &str,
    lambda: Option<f64>,
) -> Result<(), CliError> {
    let matrix = load_scores(scores)?;
    let bundled = build_task(config)?.and_then(|t| t.bundled_cost);
    let cost = resolve_cost(config, matrix.k(), bundled)?;
    let method = build_method(method_name, cost, lambda, config.alpha)?;
    let predictor = calibrate(&method, &matrix, config.alpha)
        .map_err(|e| CliError::data("calibration", e))?;
    formats::atomic_write(out, &predictor.to_record())
        .map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "calibrated {} on {} instances: threshold {} -> {}",
        method.name(),
        matrix.len(),
        predictor.threshold(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TuningTrace<'a> {
    grid: &'a [f64],
    per_lambda_loss: Vec<(f64, f64)>,
    chosen_lambda: f64,
}

pub fn cmd_tune(
    config: &RunConfig,
    scores: &Path,
    out: &Path,
    trace_out: Option<&Path>,
) -> Result<(), CliError> {
    let matrix = load_scores(scores)?;
    let bundled = build_task(config)?.and_then(|t| t.bundled_cost);
    let cost = require_cost(resolve_cost(config, matrix.k(), bundled)?, "tune")?;
    let spec = split_spec(config, config.seed)?;
    let (val, test, cal) = split(&matrix, &spec).map_err(|e| CliError::data("split", e))?;
    let result = tune_lambda(cost, &config.lambda_grid, &val, &test, &cal, config.alpha)
        .map_err(|e| CliError::data("tuning", e))?;
    formats::atomic_write(out, &result.final_predictor.to_record())
        .map_err(|e| CliError::Data(e.to_string()))?;
    for (lambda, loss) in &result.per_lambda_loss {
        println!("lambda {lambda}: mean test loss {loss:.6}");
    }
    println!(
        "chose lambda {} (recalibrated on {} fresh instances) -> {}",
        result.chosen_lambda,
        cal.len(),
        out.display()
    );
    if let Some(path) = trace_out {
        let trace = TuningTrace {
            grid: &result.grid,
            per_lambda_loss: result.per_lambda_loss.clone(),
            chosen_lambda: result.chosen_lambda,
        };
        let text = serde_json::to_string_pretty(&trace).expect("trace serializes");
        formats::atomic_write(path, &text).map_err(|e| CliError::Data(e.to_string()))?;
    }
    Ok(())
}

fn load_predictor(config: &RunConfig, path: &Path, k: usize) -> Result<CalibratedPredictor, CliError> {
    let record = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("cannot read predictor {}: {e}", path.display())))?;
    let bundled = build_task(config)?.and_then(|t| t.bundled_cost);
    let cost = resolve_cost(config, k, bundled)?;
    CalibratedPredictor::from_record(&record, cost)
        .map_err(|e| CliError::data(&format!("predictor {}", path.display()), e))
}

pub fn cmd_predict(
    config: &RunConfig,
    predictor_path: &Path,
    scores: &Path,
    out: &Path,
) -> Result<(), CliError> {
    let matrix = load_scores(scores)?;
    let predictor = load_predictor(config, predictor_path, matrix.k())?;
    let bundled = build_task(config)?.and_then(|t| t.bundled_cost);
    let cost = require_cost(resolve_cost(config, matrix.k(), bundled)?, "predict")?;

    let mut lines = String::from("id,set,loss\n");
    for instance in matrix.instances() {
        let set = predictor
            .predict_set(&instance.probs)
            .map_err(|e| CliError::data("prediction", e))?;
        let loss = cost
            .set_loss(&set)
            .map_err(|e| CliError::data("set loss", e))?;
        let members: Vec<String> = set.iter().map(|y| y.to_string()).collect();
        lines.push_str(&format!("{},{},{loss}\n", instance.id, members.join(" ")));
    }
    formats::atomic_write(out, &lines).map_err(|e| CliError::Data(e.to_string()))?;
    println!(
        "predicted sets for {} instances -> {}",
        matrix.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_evaluate(
    config: &RunConfig,
    predictor_path: &Path,
    scores: &Path,
    out_prefix: &str,
) -> Result<(), CliError> {
    let matrix = load_scores(scores)?;
    let predictor = load_predictor(config, predictor_path, matrix.k())?;
    let bundled = build_task(config)?.and_then(|t| t.bundled_cost);
    let cost = require_cost(resolve_cost(config, matrix.k(), bundled)?, "evaluate")?;
    let report = evaluate(&predictor, &matrix, &cost, config.seed)
        .map_err(|e| CliError::data("evaluation", e))?;
    let json_path = PathBuf::from(format!("{out_prefix}.json"));
    let table_path = PathBuf::from(format!("{out_prefix}.txt"));
    formats::atomic_write(&json_path, &report.to_json())
        .map_err(|e| CliError::Data(e.to_string()))?;
    formats::atomic_write(&table_path, &report.render_table())
        .map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", report.render_table());
    println!("wrote {} and {}", json_path.display(), table_path.display());
    Ok(())
}

pub fn cmd_bench(config: &RunConfig, out_prefix: &str, runs: Option<usize>) -> Result<(), CliError> {
    let runs = runs.unwrap_or(config.runs).max(1);
    let task = build_task(config)?;
    let data = config.data.as_ref();
    if task.is_some() && data.is_some() {
        return Err(CliError::Usage(
            "config has both [task] and [data]; bench needs exactly one source".into(),
        ));
    }
    if task.is_none() && data.is_none() {
        return Err(CliError::Usage(
            "bench needs a [task] or [data] stanza in the config".into(),
        ));
    }
    let source_matrix = match data {
        Some(data) => Some(load_scores(&data.scores)?),
        None => None,
    };
    let k = match (&task, &source_matrix) {
        (Some(resolved), _) => resolved.task.k(),
        (None, Some(matrix)) => matrix.k(),
        (None, None) => unreachable!(),
    };
    let cost = require_cost(
        resolve_cost(config, k, task.as_ref().and_then(|t| t.bundled_cost.clone()))?,
        "bench",
    )?;

    let methods: Vec<String> = match &config.methods {
        Some(methods) => methods.clone(),
        None => {
            if cost.penalties().is_some() {
                ["base", "penalized", "ratio"].map(String::from).to_vec()
            } else {
                ["base", "penalized", "greedy"].map(String::from).to_vec()
            }
        }
    };
    if !methods.iter().any(|m| m == "base") {
        return Err(CliError::Usage(
            "bench compares against the base method; include \"base\" in methods".into(),
        ));
    }

    let mut reports: Vec<EvaluationReport> = Vec::new();
    for run in 0..runs as u64 {
        let run_seed = config.seed.wrapping_add(1000 + run);
        let matrix = match (&task, &source_matrix) {
            (Some(resolved), _) => resolved
                .task
                .with_seed(run_seed)
                .generate(resolved.samples)
                .map_err(|e| CliError::data("generate", e))?,
            (None, Some(matrix)) => matrix.clone(),
            (None, None) => unreachable!(),
        };
        let spec = split_spec(config, config.seed.wrapping_add(2000 + run))?;
        let (val, test, cal) = split(&matrix, &spec).map_err(|e| CliError::data("split", e))?;

        for name in &methods {
            let predictor = if name == "penalized" {
                tune_lambda(
                    cost.clone(),
                    &config.lambda_grid,
                    &val,
                    &test,
                    &cal,
                    config.alpha,
                )
                .map_err(|e| CliError::data("tuning", e))?
                .final_predictor
            } else {
                let method = build_method(name, Some(cost.clone()), None, config.alpha)?;
                calibrate(&method, &cal, config.alpha)
                    .map_err(|e| CliError::data("calibration", e))?
            };
            let report = evaluate(&predictor, &test, &cost, run_seed)
                .map_err(|e| CliError::data("evaluation", e))?;
            reports.push(report);
        }
    }

    let table = compare_methods(&reports, "base").map_err(|e| CliError::data("comparison", e))?;
    let table_path = PathBuf::from(format!("{out_prefix}_comparison.txt"));
    let json_path = PathBuf::from(format!("{out_prefix}_comparison.json"));
    let reports_path = PathBuf::from(format!("{out_prefix}_reports.json"));
    formats::atomic_write(&table_path, &table.render())
        .map_err(|e| CliError::Data(e.to_string()))?;
    formats::atomic_write(&json_path, &table.to_json())
        .map_err(|e| CliError::Data(e.to_string()))?;
    let reports_json = serde_json::to_string_pretty(&reports).expect("reports serialize");
    formats::atomic_write(&reports_path, &reports_json)
        .map_err(|e| CliError::Data(e.to_string()))?;
    print!("{}", table.render());
    println!(
        "wrote {}, {}, {}",
        table_path.display(),
        json_path.display(),
        reports_path.display()
    );
    Ok(())
}

pub fn cmd_verify(config: &RunConfig, trials: usize, tasks: usize) -> Result<(), CliError> {
    let alpha = config.alpha;
    let temperature = config.task.as_ref().map(|t| t.temperature).unwrap_or(0.5);
    let seed = config.seed.wrapping_add(4242);
    let mut failures: Vec<String> = Vec::new();

    // Coverage sandwich for the four methods on a 20-label task with enough
    // contexts that score atoms stay thin even at temperature zero.
    let k = benchmark::HIERARCHICAL_K;
    let n_cal = 1000;
    let task = SyntheticTask::dirichlet(k, 2000, 0.3, temperature, seed)
        .map_err(|e| CliError::data("task", e))?;
    let separable = Arc::new(
        CostModel::separable(benchmark::random_penalties(k, 999))
            .map_err(|e| CliError::data("penalties", e))?,
    );
    let coverage_cost = Arc::new(CostModel::coverage(
        &Hierarchy::balanced(k, 5).map_err(|e| CliError::data("hierarchy", e))?,
    ));
    let methods: Vec<(&str, ScoreMethod)> = vec![
        ("base", ScoreMethod::base()),
        (
            "penalized",
            ScoreMethod::penalized(1.0, separable.clone())
                .map_err(|e| CliError::data("method", e))?,
        ),
        (
            "ratio",
            ScoreMethod::ratio(separable).map_err(|e| CliError::data("method", e))?,
        ),
        (
            "greedy",
            ScoreMethod::greedy_order(coverage_cost, alpha)
                .map_err(|e| CliError::data("method", e))?,
        ),
    ];
    for (name, method) in methods {
        let (mean, coverages) = coverage_trial(&task, &method, n_cal, 2000, trials, alpha)
            .map_err(|e| CliError::data("coverage trial", e))?;
        let std = (coverages.iter().map(|c| (c - mean).powi(2)).sum::<f64>()
            / coverages.len() as f64)
            .sqrt();
        let slack = 3.0 * std / (coverages.len() as f64).sqrt();
        let lo = 1.0 - alpha - slack;
        let hi = 1.0 - alpha + 1.0 / (n_cal + 1) as f64 + slack;
        let ok = (lo..=hi).contains(&mean);
        println!(
            "verify: coverage sandwich ({name}): {} (mean {mean:.4}, band [{lo:.4}, {hi:.4}], {trials} trials)",
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("coverage sandwich ({name}) mean {mean:.4}"));
        }
    }

    // Threshold-rule optimality against the exhaustive oracle.
    let mut max_gap = 0.0f64;
    for s in 0..tasks as u64 {
        let k = 3 + (s % 3) as usize;
        let contexts = 2 + (s % 2) as usize;
        let (task, cost, task_alpha) =
            np_aligned_task(k, contexts, seed.wrapping_add(1000 + s))
                .map_err(|e| CliError::data("aligned task", e))?;
        let oracle = oracle_optimal_loss(&task, &cost, task_alpha)
            .map_err(|e| CliError::data("oracle", e))?;
        max_gap = max_gap.max((oracle.np_rule_loss - oracle.brute_force_loss).abs());
    }
    let ok = max_gap < 1e-9;
    println!(
        "verify: threshold-rule optimality: {} (max gap {max_gap:.2e} over {tasks} tasks)",
        if ok { "PASS" } else { "FAIL" }
    );
    if !ok {
        failures.push(format!("threshold-rule optimality gap {max_gap:.2e}"));
    }

    if failures.is_empty() {
        println!("verify: all checks passed");
        Ok(())
    } else {
        Err(CliError::Verification(failures.join("; ")))
    }
}
