//! Loading logistic-regression data from CSV.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{HarnessError, Result};

/// Relative residual below which a column counts as a linear combination
/// of the columns already kept.
pub const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct LogisticData {
    /// `p × n`, one datapoint per row.
    pub features: DMatrix<f64>,
    pub labels: Vec<f64>,
    pub columns: Vec<String>,
    pub dropped_rows: usize,
    pub dropped_columns: Vec<String>,
}

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan") || t == "?"
}

fn data_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Data(msg.into())
}

/// Reads a headed CSV. Rows with a missing value are dropped, then exact
/// duplicate and linearly dependent feature columns (greedy, left to
/// right). Labels must be 0 or 1.
pub fn load_logistic_csv(path: &Path, label_column: Option<&str>) -> Result<LogisticData> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_logistic_csv(file, label_column)
}

pub fn read_logistic_csv<R: std::io::Read>(reader: R, label_column: Option<&str>) -> Result<LogisticData> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers().map_err(|e| data_err(e.to_string()))?.iter().map(str::to_owned).collect();
    if headers.len() < 2 {
        return Err(data_err("need at least one feature column and a label column"));
    }
    let label_idx = match label_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| data_err(format!("label column `{name}` not in header")))?,
        None => headers.len() - 1,
    };
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dropped_rows = 0;
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| data_err(e.to_string()))?;
        if rec.iter().any(is_missing) {
            dropped_rows += 1;
            continue;
        }
        let vals = rec
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| data_err(format!("record {}: `{s}` is not a number", line + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(data_err(format!("record {}: non-finite value", line + 1)));
        }
        rows.push(vals);
    }
    if rows.is_empty() {
        return Err(data_err("no complete rows"));
    }
    let labels: Vec<f64> = rows.iter().map(|r| r[label_idx]).collect();
    if let Some(v) = labels.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(data_err(format!("labels must be 0 or 1, found {v}")));
    }
    let candidates: Vec<usize> = (0..headers.len()).filter(|&j| j != label_idx).collect();
    let column = |j: usize| -> Vec<f64> { rows.iter().map(|r| r[j]).collect() };
    let mut kept: Vec<usize> = Vec::new();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let mut dropped_columns = Vec::new();
    for &j in &candidates {
        let col = column(j);
        if kept.iter().any(|&k| column(k) == col) {
            dropped_columns.push(headers[j].clone());
            continue;
        }
        let norm = dot(&col, &col).sqrt();
        let mut r = col;
        // two passes of modified Gram–Schmidt against the kept columns
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&r, b);
                for (x, y) in r.iter_mut().zip(b) {
                    *x -= c * y;
                }
            }
        }
        let rn = dot(&r, &r).sqrt();
        if norm == 0.0 || rn <= RANK_TOL * norm {
            dropped_columns.push(headers[j].clone());
            continue;
        }
        basis.push(r.into_iter().map(|x| x / rn).collect());
        kept.push(j);
    }
    if kept.is_empty() {
        return Err(data_err("no usable feature columns"));
    }
    let features = DMatrix::from_fn(rows.len(), kept.len(), |i, c| rows[i][kept[c]]);
    Ok(LogisticData {
        features,
        labels,
        columns: kept.iter().map(|&j| headers[j].clone()).collect(),
        dropped_rows,
        dropped_columns,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
