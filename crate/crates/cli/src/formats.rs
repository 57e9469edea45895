//! File formats: the score CSV, hierarchy edge lists, penalty tables, and
//! category files, plus atomic writes so malformed runs never leave partial
//! outputs behind.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use thiserror::Error;
use ucp_core::data::{DataError, Instance, LabelSpace, ProbVector, ScoreMatrix};
use ucp_core::hierarchy::{Hierarchy, HierarchyError};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}:{row}: {message}")]
    Parse {
        path: String,
        row: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    File { path: String, message: String },
    #[error("{path}:{row}: probabilities sum to {sum}; rows must sum to 1 within 1e-2")]
    RowNotNormalized { path: String, row: usize, sum: f64 },
    #[error("{path}: cost table is missing labels {missing:?}")]
    MissingCosts { path: String, missing: Vec<usize> },
    #[error("{path}:{row}: cost {value} for label {label} must be positive")]
    NonPositiveCost {
        path: String,
        row: usize,
        label: usize,
        value: f64,
    },
    #[error("{path}: {source}")]
    Hierarchy {
        path: String,
        source: HierarchyError,
    },
    #[error("{path}: {source}")]
    Data { path: String, source: DataError },
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

/// Writes via a temp file in the same directory followed by a rename, so a
/// failed run never leaves a truncated output.
pub fn atomic_write(path: &Path, contents: &str) -> Result<(), FormatError> {
    let io_err = |source| FormatError::Io {
        path: display(path),
        source,
    };
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().to_string())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut file = std::fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(contents.as_bytes()).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
    }
    std::fs::rename(&tmp, path).map_err(io_err)
}

/// Score CSV: header `id,label,p_0,...,p_{K-1}`, one row per instance.
/// Probabilities are renormalized within the ingest tolerance; rows further
/// than 1e-2 from unit mass are rejected with their row number.
pub fn load_scores(path: &Path) -> Result<ScoreMatrix, FormatError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| FormatError::File {
            path: display(path),
            message: e.to_string(),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| FormatError::File {
            path: display(path),
            message: e.to_string(),
        })?
        .clone();
    if headers.len() < 3 || &headers[0] != "id" || &headers[1] != "label" {
        return Err(FormatError::File {
            path: display(path),
            message: format!(
                "expected header id,label,p_0,...,p_(K-1); got {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    }
    let k = headers.len() - 2;
    for (i, name) in headers.iter().skip(2).enumerate() {
        if name != format!("p_{i}") {
            return Err(FormatError::File {
                path: display(path),
                message: format!("probability column {} is named {name:?}, expected p_{i}", i + 2),
            });
        }
    }

    let mut instances = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let row = index + 2; // header is row 1
        let record = record.map_err(|e| FormatError::Parse {
            path: display(path),
            row,
            message: e.to_string(),
        })?;
        if record.len() != k + 2 {
            return Err(FormatError::Parse {
                path: display(path),
                row,
                message: format!("expected {} fields, got {}", k + 2, record.len()),
            });
        }
        let id = record[0].to_string();
        let label: usize = record[1].parse().map_err(|e| FormatError::Parse {
            path: display(path),
            row,
            message: format!("label {:?}: {e}", &record[1]),
        })?;
        if label >= k {
            return Err(FormatError::Parse {
                path: display(path),
                row,
                message: format!("label {label} outside [0, {k})"),
            });
        }
        let mut probs = Vec::with_capacity(k);
        for (column, field) in record.iter().skip(2).enumerate() {
            let value: f64 = field.parse().map_err(|e| FormatError::Parse {
                path: display(path),
                row,
                message: format!("column p_{column}, value {field:?}: {e}"),
            })?;
            probs.push(value);
        }
        let probs = ProbVector::new(probs).map_err(|e| match e {
            DataError::NotNormalized { sum } => FormatError::RowNotNormalized {
                path: display(path),
                row,
                sum,
            },
            other => FormatError::Parse {
                path: display(path),
                row,
                message: other.to_string(),
            },
        })?;
        instances.push(Instance {
            id,
            true_label: label,
            probs,
        });
    }

    let space = LabelSpace::new(k).map_err(|e| FormatError::Data {
        path: display(path),
        source: e,
    })?;
    ScoreMatrix::new(space, instances).map_err(|e| FormatError::Data {
        path: display(path),
        source: e,
    })
}

pub fn write_scores(path: &Path, matrix: &ScoreMatrix) -> Result<(), FormatError> {
    let k = matrix.k();
    let mut out = String::from("id,label");
    for i in 0..k {
        out.push_str(&format!(",p_{i}"));
    }
    out.push('\n');
    for instance in matrix.instances() {
        out.push_str(&format!("{},{}", instance.id, instance.true_label));
        for &p in instance.probs.as_slice() {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    atomic_write(path, &out)
}

/// Hierarchy file: a `child,parent` edge section and a `label_id,leaf_name`
/// mapping section separated by a blank line. The root is the unique node
/// that never appears as a child (a `root,root` self-edge is also accepted).
pub fn load_hierarchy(path: &Path) -> Result<Hierarchy, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::Io {
        path: display(path),
        source: e,
    })?;
    let file_error = |message: String| FormatError::File {
        path: display(path),
        message,
    };
    let parse_error = |row: usize, message: String| FormatError::Parse {
        path: display(path),
        row,
        message,
    };

    let mut sections = text.split("\n\n");
    let edges_text = sections.next().unwrap_or_default();
    let mapping_text = sections.next().ok_or_else(|| {
        file_error("expected an edge section and a mapping section separated by a blank line".into())
    })?;

    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut names: Vec<String> = Vec::new();
    let intern = |name: &str, names: &mut Vec<String>, ids: &mut HashMap<String, usize>| {
        *ids.entry(name.to_string()).or_insert_with(|| {
            names.push(name.to_string());
            names.len() - 1
        })
    };

    let mut parent_of: HashMap<usize, usize> = HashMap::new();
    for (index, line) in edges_text.lines().enumerate() {
        let row = index + 1;
        let line = line.trim_end_matches('\r');
        if row == 1 {
            if line != "child,parent" {
                return Err(file_error(format!(
                    "edge section must start with the header child,parent; got {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (child, parent) = line
            .split_once(',')
            .ok_or_else(|| parse_error(row, format!("edge {line:?} is not child,parent")))?;
        let child_id = intern(child.trim(), &mut names, &mut ids);
        let parent_id = intern(parent.trim(), &mut names, &mut ids);
        if let Some(previous) = parent_of.insert(child_id, parent_id) {
            if previous != parent_id {
                return Err(parse_error(
                    row,
                    format!("node {:?} has two different parents", child.trim()),
                ));
            }
        }
    }

    // Roots: explicit self-edges, plus nodes that never appear as a child.
    let mut parent_table = vec![usize::MAX; names.len()];
    for (node, slot) in parent_table.iter_mut().enumerate() {
        *slot = parent_of.get(&node).copied().unwrap_or(node);
    }

    let mapping_start = edges_text.lines().count() + 2;
    let mut leaf_by_label: HashMap<usize, usize> = HashMap::new();
    for (index, line) in mapping_text.lines().enumerate() {
        let row = mapping_start + index;
        let line = line.trim_end_matches('\r');
        if index == 0 {
            if line != "label_id,leaf_name" {
                return Err(file_error(format!(
                    "mapping section must start with the header label_id,leaf_name; got {line:?}"
                )));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (label, leaf) = line
            .split_once(',')
            .ok_or_else(|| parse_error(row, format!("mapping {line:?} is not label_id,leaf_name")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| parse_error(row, format!("label id {:?}: {e}", label.trim())))?;
        let leaf_id = *ids
            .get(leaf.trim())
            .ok_or_else(|| parse_error(row, format!("unknown leaf {:?}", leaf.trim())))?;
        if leaf_by_label.insert(label, leaf_id).is_some() {
            return Err(parse_error(row, format!("label {label} mapped twice")));
        }
    }
    if leaf_by_label.is_empty() {
        return Err(file_error("mapping section has no labels".into()));
    }
    let k = leaf_by_label.len();
    let mut leaf_of_label = vec![usize::MAX; k];
    let mut missing = Vec::new();
    for (label, slot) in leaf_of_label.iter_mut().enumerate() {
        match leaf_by_label.get(&label) {
            Some(&leaf) => *slot = leaf,
            None => missing.push(label),
        }
    }
    if !missing.is_empty() {
        return Err(file_error(format!(
            "label ids must cover 0..{} exactly; missing {missing:?}",
            k - 1
        )));
    }

    Hierarchy::new(names, parent_table, leaf_of_label).map_err(|e| FormatError::Hierarchy {
        path: display(path),
        source: e,
    })
}

pub fn write_hierarchy(path: &Path, hierarchy: &Hierarchy) -> Result<(), FormatError> {
    let mut out = String::from("child,parent\n");
    for node in 0..hierarchy.node_count() {
        let parent = hierarchy.parent_table()[node];
        if parent != node {
            out.push_str(&format!(
                "{},{}\n",
                hierarchy.node_name(node),
                hierarchy.node_name(parent)
            ));
        }
    }
    out.push('\n');
    out.push_str("label_id,leaf_name\n");
    for (label, &leaf) in hierarchy.leaf_table().iter().enumerate() {
        out.push_str(&format!("{label},{}\n", hierarchy.node_name(leaf)));
    }
    atomic_write(path, &out)
}

/// Penalty CSV: header `label_id,cost`, one positive cost per label, total
/// over the label space.
pub fn load_costs(path: &Path, k: usize) -> Result<Vec<f64>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::Io {
        path: display(path),
        source: e,
    })?;
    let mut values: Vec<Option<f64>> = vec![None; k];
    for (index, line) in text.lines().enumerate() {
        let row = index + 1;
        let line = line.trim_end_matches('\r');
        if row == 1 {
            if line != "label_id,cost" {
                return Err(FormatError::File {
                    path: display(path),
                    message: format!("expected header label_id,cost; got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| FormatError::Parse {
            path: display(path),
            row,
            message,
        };
        let (label, cost) = line
            .split_once(',')
            .ok_or_else(|| parse_error(format!("row {line:?} is not label_id,cost")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| parse_error(format!("label id {:?}: {e}", label.trim())))?;
        if label >= k {
            return Err(parse_error(format!("label {label} outside [0, {k})")));
        }
        let value: f64 = cost
            .trim()
            .parse()
            .map_err(|e| parse_error(format!("cost {:?}: {e}", cost.trim())))?;
        if !value.is_finite() || value <= 0.0 {
            return Err(FormatError::NonPositiveCost {
                path: display(path),
                row,
                label,
                value,
            });
        }
        values[label] = Some(value);
    }
    let missing: Vec<usize> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(label, _)| label)
        .collect();
    if !missing.is_empty() {
        return Err(FormatError::MissingCosts {
            path: display(path),
            missing,
        });
    }
    Ok(values.into_iter().map(|v| v.unwrap()).collect())
}

pub fn write_costs(path: &Path, penalties: &[f64]) -> Result<(), FormatError> {
    let mut out = String::from("label_id,cost\n");
    for (label, &cost) in penalties.iter().enumerate() {
        out.push_str(&format!("{label},{cost}\n"));
    }
    atomic_write(path, &out)
}

/// Category CSV: header `category_name,label_id`, multiple rows per
/// category; categories are ordered by first appearance and may overlap.
pub fn load_categories(path: &Path, k: usize) -> Result<Vec<Vec<usize>>, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|e| FormatError::Io {
        path: display(path),
        source: e,
    })?;
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<usize>> = HashMap::new();
    for (index, line) in text.lines().enumerate() {
        let row = index + 1;
        let line = line.trim_end_matches('\r');
        if row == 1 {
            if line != "category_name,label_id" {
                return Err(FormatError::File {
                    path: display(path),
                    message: format!("expected header category_name,label_id; got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parse_error = |message: String| FormatError::Parse {
            path: display(path),
            row,
            message,
        };
        let (name, label) = line
            .split_once(',')
            .ok_or_else(|| parse_error(format!("row {line:?} is not category_name,label_id")))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|e| parse_error(format!("label id {:?}: {e}", label.trim())))?;
        if label >= k {
            return Err(parse_error(format!("label {label} outside [0, {k})")));
        }
        let name = name.trim().to_string();
        if !members.contains_key(&name) {
            order.push(name.clone());
        }
        members.entry(name).or_default().push(label);
    }
    if order.is_empty() {
        return Err(FormatError::File {
            path: display(path),
            message: "no categories found".into(),
        });
    }
    Ok(order
        .into_iter()
        .map(|name| {
            let mut labels = members.remove(&name).unwrap();
            labels.sort_unstable();
            labels.dedup();
            labels
        })
        .collect())
}
