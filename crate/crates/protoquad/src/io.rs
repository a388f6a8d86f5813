//! Text-format persistence: datasets as CSV, embeddings in a small
//! line-oriented format, reports as JSON.
//!
//! Floats are written with the shortest round-trip representation, so a
//! save/load cycle reproduces the values bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::embedding::{Dataset, GradientMatrix, ParamVector, TrainOutcome};
use crate::error::{Error, Result};
use crate::kernel::KernelOracle;
use crate::linalg::Matrix;
use crate::num::Real;

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(&path_str(path), e))
}

fn write_string(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content).map_err(|e| Error::io(&path_str(path), e))
}

/// Load a dataset from CSV: a header row with one `label` column (values 0
/// or 1), an optional `id` column, and numeric feature columns in header
/// order. Row order is preserved; ids default to row numbers.
pub fn load_dataset<R: Real>(path: &Path) -> Result<Dataset<R>> {
    let p = path_str(path);
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&p, 1, "empty file"))?;
    let columns: Vec<&str> = header.trim_end_matches('\r').split(',').collect();
    let label_cols: Vec<usize> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| **c == "label")
        .map(|(i, _)| i)
        .collect();
    let label_col = match label_cols.as_slice() {
        [one] => *one,
        [] => return Err(Error::parse(&p, 1, "no `label` column in header")),
        _ => return Err(Error::parse(&p, 1, "multiple `label` columns in header")),
    };
    let id_col = {
        let ids: Vec<usize> = columns
            .iter()
            .enumerate()
            .filter(|(_, c)| **c == "id")
            .map(|(i, _)| i)
            .collect();
        match ids.as_slice() {
            [] => None,
            [one] => Some(*one),
            _ => return Err(Error::parse(&p, 1, "multiple `id` columns in header")),
        }
    };
    let feature_cols: Vec<(usize, String)> = columns
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != label_col && Some(*i) != id_col)
        .map(|(i, c)| (i, c.to_string()))
        .collect();
    if feature_cols.is_empty() {
        return Err(Error::parse(&p, 1, "no feature columns in header"));
    }

    let mut rows: Vec<Vec<R>> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    for (line_idx, line) in lines {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let line_no = line_idx + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != columns.len() {
            return Err(Error::parse(
                &p,
                line_no,
                format!("expected {} cells, found {}", columns.len(), cells.len()),
            ));
        }
        let label_raw = cells[label_col].trim();
        let label_val: f64 = label_raw.parse().map_err(|_| {
            Error::parse(&p, line_no, format!("label `{label_raw}` is not numeric"))
        })?;
        let label = if label_val == 0.0 {
            0u8
        } else if label_val == 1.0 {
            1u8
        } else {
            return Err(Error::parse(
                &p,
                line_no,
                format!("label value {label_val} is not 0 or 1"),
            ));
        };
        let mut row = Vec::with_capacity(feature_cols.len());
        for (col, name) in &feature_cols {
            let cell = cells[*col].trim();
            let value: R = cell.parse().map_err(|_| {
                Error::parse(
                    &p,
                    line_no,
                    format!("column `{name}`: cell `{cell}` is not numeric"),
                )
            })?;
            if !value.is_finite() {
                return Err(Error::parse(
                    &p,
                    line_no,
                    format!("column `{name}`: non-finite value"),
                ));
            }
            row.push(value);
        }
        ids.push(match id_col {
            Some(c) => cells[c].trim().to_string(),
            None => rows.len().to_string(),
        });
        labels.push(label);
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse(&p, 1, "no data rows"));
    }
    Dataset::new(Matrix::from_rows(&rows), labels, ids)
}

/// Write a dataset as CSV with `id,label,f0..f{d-1}` columns.
pub fn save_dataset<R: Real>(data: &Dataset<R>, path: &Path) -> Result<()> {
    let mut out = String::from("id,label");
    for j in 0..data.dim() {
        let _ = write!(out, ",f{j}");
    }
    out.push('\n');
    for i in 0..data.len() {
        let _ = write!(out, "{},{}", data.ids()[i], data.labels()[i]);
        for j in 0..data.dim() {
            let _ = write!(out, ",{}", data.features().get(i, j));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

const EMBEDDING_MAGIC: &str = "FISHGRAD";
const EMBEDDING_VERSION: &str = "1";

/// Write a gradient-embedding matrix: a `FISHGRAD 1 <n> <p>` header line,
/// then `n` lines of `p` space-separated decimal floats.
pub fn save_embeddings<R: Real>(grads: &GradientMatrix<R>, path: &Path) -> Result<()> {
    let mut out = format!(
        "{EMBEDDING_MAGIC} {EMBEDDING_VERSION} {} {}\n",
        grads.len(),
        grads.param_dim()
    );
    for i in 0..grads.len() {
        for (j, v) in grads.row(i).iter().enumerate() {
            if j > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    write_string(path, &out)
}

/// Parse an embedding file written by [`save_embeddings`] (or by an external
/// model exporting its per-example gradients).
pub fn load_embeddings<R: Real>(path: &Path) -> Result<GradientMatrix<R>> {
    let p = path_str(path);
    let content = read_to_string(path)?;
    let mut lines = content.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(&p, 1, "empty file"))?;
    let tokens: Vec<&str> = header.split_whitespace().collect();
    if tokens.len() != 4 || tokens[0] != EMBEDDING_MAGIC {
        return Err(Error::parse(
            &p,
            1,
            format!("expected `{EMBEDDING_MAGIC} {EMBEDDING_VERSION} <n> <p>` header"),
        ));
    }
    if tokens[1] != EMBEDDING_VERSION {
        return Err(Error::parse(
            &p,
            1,
            format!("unsupported version `{}`", tokens[1]),
        ));
    }
    let n: usize = tokens[2]
        .parse()
        .map_err(|_| Error::parse(&p, 1, "row count is not an integer"))?;
    let dim: usize = tokens[3]
        .parse()
        .map_err(|_| Error::parse(&p, 1, "column count is not an integer"))?;

    let mut rows: Vec<Vec<R>> = Vec::with_capacity(n);
    for (line_idx, line) in lines {
        let line_no = line_idx + 1;
        if rows.len() == n {
            if !line.trim().is_empty() {
                return Err(Error::parse(
                    &p,
                    line_no,
                    format!("extra content after {n} declared rows"),
                ));
            }
            continue;
        }
        if line.trim().is_empty() {
            return Err(Error::parse(&p, line_no, "unexpected blank row"));
        }
        let mut row = Vec::with_capacity(dim);
        for token in line.split_whitespace() {
            let value: R = token.parse().map_err(|_| {
                Error::parse(&p, line_no, format!("token `{token}` is not numeric"))
            })?;
            if !value.is_finite() {
                return Err(Error::parse(
                    &p,
                    line_no,
                    format!("non-finite token `{token}`"),
                ));
            }
            row.push(value);
        }
        if row.len() != dim {
            return Err(Error::parse(
                &p,
                line_no,
                format!("expected {dim} values, found {}", row.len()),
            ));
        }
        rows.push(row);
    }
    if rows.len() != n {
        return Err(Error::parse(
            &p,
            1,
            format!("header declares {n} rows but file has {}", rows.len()),
        ));
    }
    GradientMatrix::new(Matrix::from_rows(&rows))
}

/// Largest train-side size the kernel dump will materialize.
pub const KERNEL_DUMP_LIMIT: usize = 10_000;

/// Write the train x train kernel matrix as CSV for diagnostics. Refuses
/// matrices above [`KERNEL_DUMP_LIMIT`] on a side.
pub fn dump_kernel_matrix<R: Real>(oracle: &mut KernelOracle<R>, path: &Path) -> Result<()> {
    let t = oracle.train_len();
    if t > KERNEL_DUMP_LIMIT {
        return Err(Error::invalid(format!(
            "refusing to dump a {t} x {t} kernel matrix (limit {KERNEL_DUMP_LIMIT})"
        )));
    }
    oracle.build_cache();
    let cache = oracle.cached_matrix().expect("cache was just built");
    let mut out = String::new();
    for i in 0..t {
        for j in 0..t {
            if j > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", cache.get(i, j));
        }
        out.push('\n');
    }
    write_string(path, &out)
}

/// Saved model parameters plus fit metadata.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct ModelFile {
    pub params: Vec<f64>,
    pub intercept: bool,
    pub l2: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_inf_norm: f64,
}

impl ModelFile {
    pub fn from_outcome(outcome: &TrainOutcome<f64>, intercept: bool, l2: f64) -> Self {
        ModelFile {
            params: outcome.params.values().to_vec(),
            intercept,
            l2,
            converged: outcome.converged,
            iterations: outcome.iterations,
            grad_inf_norm: outcome.grad_inf_norm,
        }
    }

    pub fn param_vector(&self) -> Result<ParamVector<f64>> {
        ParamVector::new(self.params.clone())
    }
}

/// Serialize any report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    body.push('\n');
    write_string(path, &body)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let p = path_str(path);
    let content = read_to_string(path)?;
    serde_json::from_str(&content).map_err(|e| Error::parse(&p, e.line(), e.to_string()))
}
