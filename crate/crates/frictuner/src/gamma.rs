//! Parsing of `--gamma` values.

use std::path::{Path, PathBuf};

use frictuner_core::linalg::{sqrt_and_inv_sqrt, SymMatrix};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum GammaSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    File(PathBuf),
    /// `Σ^{-1/2}` for a Gaussian target.
    SigmaInvHalf,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn parse_number(s: &str) -> Result<f64> {
    let v: f64 = s.trim().parse().map_err(|_| bad(format!("`{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(bad(format!("friction entry `{s}` is not finite")));
    }
    Ok(v)
}

impl GammaSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "sigma-inv-half" {
            return Ok(GammaSpec::SigmaInvHalf);
        }
        if let Some(rest) = s.strip_prefix("diag:") {
            let d = rest.split(',').map(parse_number).collect::<Result<Vec<f64>>>()?;
            return Ok(GammaSpec::Diagonal(d));
        }
        if let Ok(v) = s.parse::<f64>() {
            if !v.is_finite() {
                return Err(bad(format!("friction `{s}` is not finite")));
            }
            return Ok(GammaSpec::Scalar(v));
        }
        if s.ends_with(".csv") || Path::new(s).is_file() {
            return Ok(GammaSpec::File(PathBuf::from(s)));
        }
        Err(bad(format!("cannot read friction `{s}`: expected a number, diag:v1,...,vn, a .csv file or sigma-inv-half")))
    }

    /// The friction for an `n`-dimensional target; `precision` is the
    /// Gaussian precision when the target has one.
    pub fn resolve(&self, n: usize, precision: Option<&SymMatrix>, base: &Path) -> Result<SymMatrix> {
        let m = match self {
            GammaSpec::Scalar(v) => SymMatrix::scaled_identity(n, *v),
            GammaSpec::Diagonal(d) => {
                if d.len() != n {
                    return Err(bad(format!("diag: has {} entries for dimension {n}", d.len())));
                }
                SymMatrix::from_diagonal(d)
            }
            GammaSpec::SigmaInvHalf => {
                let p = precision.ok_or_else(|| bad("sigma-inv-half needs a Gaussian target"))?;
                sqrt_and_inv_sqrt(p)?.0
            }
            GammaSpec::File(path) => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                let text = std::fs::read_to_string(&full).map_err(|e| HarnessError::io(&full, e))?;
                matrix_from_csv(&text, n)?
            }
        };
        if m.min_eigenvalue()? <= 0.0 {
            return Err(bad("friction must be positive definite"));
        }
        Ok(m)
    }
}

/// Accepts either `n` rows of `n` numbers, or a table with an `epoch`
/// column and `n²` row-major entries (as written by `optimize`), in which
/// case the last row of the first chain present is taken.
pub fn matrix_from_csv(text: &str, n: usize) -> Result<SymMatrix> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).collect();
    let first = *lines.first().ok_or_else(|| bad("friction file is empty"))?;
    let header: Vec<&str> = first.split(',').map(str::trim).collect();
    if header.iter().any(|h| h.parse::<f64>().is_err()) {
        let epoch = header.iter().position(|h| *h == "epoch").ok_or_else(|| bad("friction table has no epoch column"))?;
        let start = epoch + 1;
        if header.len() < start + n * n {
            return Err(bad(format!("friction table has {} entry columns, expected {}", header.len() - start, n * n)));
        }
        let rows: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').map(str::trim).collect()).collect();
        let chain_col = header.iter().position(|h| *h == "chain");
        let first_chain = chain_col.and_then(|c| rows.first().map(|r| r[c]));
        let last = rows
            .iter()
            .filter(|r| match (chain_col, first_chain) {
                (Some(c), Some(f)) => r[c] == f,
                _ => true,
            })
            .last()
            .ok_or_else(|| bad("friction table has no rows"))?;
        let v = last[start..start + n * n].iter().map(|s| parse_number(s)).collect::<Result<Vec<f64>>>()?;
        return Ok(SymMatrix::from_row_slice(n, &v)?);
    }
    if lines.len() != n {
        return Err(bad(format!("friction file has {} rows, expected {n}", lines.len())));
    }
    let mut v = Vec::with_capacity(n * n);
    for l in &lines {
        let row = l.split(',').map(parse_number).collect::<Result<Vec<f64>>>()?;
        if row.len() != n {
            return Err(bad(format!("friction row has {} entries, expected {n}", row.len())));
        }
        v.extend(row);
    }
    Ok(SymMatrix::from_row_slice(n, &v)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn parse_forms() {
        assert_eq!(GammaSpec::parse("1.5").unwrap(), GammaSpec::Scalar(1.5));
        assert_eq!(GammaSpec::parse("diag:1,2.5").unwrap(), GammaSpec::Diagonal(vec![1.0, 2.5]));
        assert_eq!(GammaSpec::parse("sigma-inv-half").unwrap(), GammaSpec::SigmaInvHalf);
        assert_eq!(GammaSpec::parse("g.csv").unwrap(), GammaSpec::File("g.csv".into()));
        assert!(GammaSpec::parse("diag:1,x").is_err());
        assert!(GammaSpec::parse("fast").is_err());
        assert!(GammaSpec::parse("inf").is_err());
    }

    #[test]
    fn resolve_checks() {
        let here = Path::new(".");
        assert_eq!(GammaSpec::Scalar(2.0).resolve(2, None, here).unwrap(), SymMatrix::scaled_identity(2, 2.0));
        assert!(GammaSpec::Scalar(-1.0).resolve(1, None, here).is_err());
        assert!(GammaSpec::Diagonal(vec![1.0]).resolve(2, None, here).is_err());
        assert!(GammaSpec::SigmaInvHalf.resolve(1, None, here).is_err());
        let p = SymMatrix::from_diagonal(&[4.0, 9.0]);
        let g = GammaSpec::SigmaInvHalf.resolve(2, Some(&p), here).unwrap();
        assert_relative_eq!(g.get(0, 0), 2.0, epsilon = 1e-12);
        assert_relative_eq!(g.get(1, 1), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn csv_matrix_and_trajectory() {
        let m = matrix_from_csv("# comment\n2,0.5\n0.5,1\n", 2).unwrap();
        assert_eq!(m.get(0, 1), 0.5);
        let t = "# schema=1\nchain,epoch,g_0_0\n0,0,1\n0,125,0.75\n1,0,1\n1,125,9\n";
        assert_eq!(matrix_from_csv(t, 1).unwrap().get(0, 0), 0.75);
        assert!(matrix_from_csv("1,2\n", 2).is_err());
    }
}
