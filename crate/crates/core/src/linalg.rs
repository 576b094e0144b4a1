//! Dense symmetric linear algebra used throughout the crate.
//!
//! Everything here is small and dense: friction matrices, precisions and
//! tangent blocks are at most a few hundred rows.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tolerance used when checking eigenvalue floors.
pub const TOL_EIG: f64 = 1e-10;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITER: usize = 10_000;

/// A symmetric matrix. The constructor averages the input with its transpose
/// so `a[(i, j)] == a[(j, i)]` holds bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        symmetrize(&a)
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self(DMatrix::identity(n, n) * s)
    }

    pub fn from_diagonal(d: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// Builds from row-major entries of an `n x n` matrix.
    pub fn from_row_slice(n: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != n * n {
            return Err(Error::Dimension(format!(
                "expected {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.0.diagonal().iter().copied().collect()
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        let n = self.dim();
        let mut out = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &other.0)
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix(&self.0 * s)
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.0.amax()
    }

    /// Eigenvalues in ascending order with matching eigenvectors as columns.
    pub fn eigen(&self) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if let Some(idx) = self.0.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { what: "symmetric matrix", index: idx });
        }
        let eig = self
            .0
            .clone()
            .try_symmetric_eigen(EIG_EPS, EIG_MAX_ITER)
            .ok_or_else(|| Error::Numeric("symmetric eigensolver did not converge".into()))?;
        let n = self.dim();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
        let mut vecs = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vecs.set_column(dst, &eig.eigenvectors.column(src));
        }
        Ok((vals, vecs))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(self.eigen()?.0[0])
    }

    /// Applies `f` to every eigenvalue and reassembles in the same basis.
    pub fn map_spectrum(&self, mut f: impl FnMut(f64) -> f64) -> Result<SymMatrix> {
        let (vals, vecs) = self.eigen()?;
        let mut mapped = Vec::with_capacity(vals.len());
        for (i, &l) in vals.iter().enumerate() {
            let v = f(l);
            if !v.is_finite() {
                return Err(Error::NonFinite { what: "spectral function value", index: i });
            }
            mapped.push(v);
        }
        Ok(reassemble(&mapped, &vecs))
    }
}

fn reassemble(vals: &[f64], vecs: &DMatrix<f64>) -> SymMatrix {
    let d = DMatrix::from_diagonal(&DVector::from_column_slice(vals));
    let m = vecs * d * vecs.transpose();
    SymMatrix(sym_average(&m))
}

fn sym_average(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `(a + aᵀ)/2`.
pub fn symmetrize(a: &DMatrix<f64>) -> Result<SymMatrix> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension(format!(
            "symmetrize needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(SymMatrix(sym_average(a)))
}

/// Outer product `u vᵀ`.
pub fn outer(u: &[f64], v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
}

/// SPD friction matrix with an eigenvalue floor.
#[derive(Debug, Clone, PartialEq)]
pub struct FrictionMatrix {
    mat: SymMatrix,
    floor: f64,
}

impl FrictionMatrix {
    /// Wraps `mat`, checking that its spectrum sits above `floor`.
    pub fn new(mat: SymMatrix, floor: f64) -> Result<Self> {
        if !(floor > 0.0) {
            return Err(Error::Config(format!("eigenvalue floor must be positive, got {floor}")));
        }
        let lmin = mat.min_eigenvalue()?;
        if lmin < floor - TOL_EIG {
            return Err(Error::Config(format!(
                "friction has eigenvalue {lmin} below floor {floor}"
            )));
        }
        Ok(Self { mat, floor })
    }

    pub fn scalar(n: usize, gamma: f64, floor: f64) -> Result<Self> {
        Self::new(SymMatrix::scaled_identity(n, gamma), floor)
    }

    pub fn mat(&self) -> &SymMatrix {
        &self.mat
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn dim(&self) -> usize {
        self.mat.dim()
    }
}

/// Eigenvalue clipping onto `{λ ≥ μ}`.
pub fn project_pd(m: &SymMatrix, mu: f64) -> Result<FrictionMatrix> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("eigenvalue floor must be positive, got {mu}")));
    }
    let (vals, vecs) = m.eigen()?;
    if vals.iter().all(|&l| l >= mu) {
        return Ok(FrictionMatrix { mat: m.clone(), floor: mu });
    }
    let clipped: Vec<f64> = vals.iter().map(|&l| l.max(mu)).collect();
    Ok(FrictionMatrix { mat: reassemble(&clipped, &vecs), floor: mu })
}

/// Applies a scalar function to the spectrum of `g`.
pub fn spd_matrix_function(g: &FrictionMatrix, f: impl FnMut(f64) -> f64) -> Result<SymMatrix> {
    g.mat.map_spectrum(f)
}

/// Symmetric square root and inverse square root of an SPD matrix.
pub fn sqrt_and_inv_sqrt(m: &SymMatrix) -> Result<(SymMatrix, SymMatrix)> {
    let (vals, vecs) = m.eigen()?;
    if let Some(i) = vals.iter().position(|&l| !(l > 0.0)) {
        return Err(Error::Numeric(format!("matrix not positive definite (eigenvalue {})", vals[i])));
    }
    let s: Vec<f64> = vals.iter().map(|&l| libm::sqrt(l)).collect();
    let si: Vec<f64> = s.iter().map(|&l| 1.0 / l).collect();
    Ok((reassemble(&s, &vecs), reassemble(&si, &vecs)))
}
