//! Empirical asymptotic variances from sampled paths.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;

/// Block-averaged asymptotic variance for one or more observables.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockEstimate {
    pub n_blocks: usize,
    pub block_len: usize,
    pub dt: f64,
    pub per_observable: Vec<f64>,
    /// Standard error of each entry of `per_observable`, from the spread of
    /// the squared block sums.
    pub stderr: Vec<f64>,
    pub mean: f64,
    /// Sample variance of `per_observable` (zero for a single observable).
    pub spread: f64,
}

fn single(samples: &[f64], burn_in: usize, block_len: usize, n_blocks: usize, dt: f64) -> (f64, f64) {
    let used = &samples[burn_in..burn_in + n_blocks * block_len];
    let mean = used.iter().sum::<f64>() / used.len() as f64;
    let norm = 1.0 / libm::sqrt(block_len as f64 * dt);
    let squares: Vec<f64> = used
        .chunks_exact(block_len)
        .map(|block| {
            let s = norm * dt * block.iter().map(|x| x - mean).sum::<f64>();
            s * s
        })
        .collect();
    let nb = n_blocks as f64;
    let est = squares.iter().sum::<f64>() / nb;
    let se = if n_blocks > 1 {
        let v = squares.iter().map(|s| (s - est) * (s - est)).sum::<f64>() / (nb - 1.0);
        libm::sqrt(v / nb)
    } else {
        f64::NAN
    };
    (est, se)
}

/// `(1/N_B) Σ_l [ (TΔt)^{-1/2} Σ_{i<T} Δt (f_{B+Tl+i} − f̄) ]²` per observable,
/// with `f̄` the plain average of the `N_B·T` samples used.
pub fn block_variance(
    series: &[&[f64]],
    burn_in: usize,
    block_len: usize,
    n_blocks: usize,
    dt: f64,
) -> Result<BlockEstimate> {
    if series.is_empty() {
        return Err(Error::Data("no observable series given".into()));
    }
    if block_len == 0 || n_blocks == 0 || !(dt > 0.0) {
        return Err(Error::Config(format!("invalid block parameters T={block_len}, N_B={n_blocks}, dt={dt}")));
    }
    let need = burn_in + n_blocks * block_len;
    if let Some(s) = series.iter().find(|s| s.len() < need) {
        return Err(Error::Data(format!("{} samples available, {need} needed", s.len())));
    }
    let (per_observable, stderr): (Vec<f64>, Vec<f64>) =
        series.iter().map(|s| single(s, burn_in, block_len, n_blocks, dt)).unzip();
    let m = per_observable.len() as f64;
    let mean = per_observable.iter().sum::<f64>() / m;
    let spread = if per_observable.len() > 1 {
        per_observable.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(BlockEstimate { n_blocks, block_len, dt, per_observable, stderr, mean, spread })
}

/// Largest block count that fits the samples after burn-in.
pub fn max_blocks(len: usize, burn_in: usize, block_len: usize) -> usize {
    len.saturating_sub(burn_in) / block_len.max(1)
}

/// `2 · mean_l ζ_l Γ ζ_lᵀ` over the recorded rows.
pub fn zeta_variance_proxy(records: &[Vec<f64>], gamma: &SymMatrix) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Data("no converged blocks to estimate from".into()));
    }
    let total: f64 = records.iter().map(|z| quadratic_form(z, gamma)).sum::<Result<f64>>()?;
    Ok(2.0 * total / records.len() as f64)
}

pub(crate) fn quadratic_form(z: &[f64], gamma: &SymMatrix) -> Result<f64> {
    let n = gamma.dim();
    if z.len() != n {
        return Err(Error::Dimension(format!("row of length {} against {n}x{n} friction", z.len())));
    }
    let g = gamma.as_matrix();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += z[i] * g[(i, j)] * z[j];
        }
    }
    Ok(s)
}
