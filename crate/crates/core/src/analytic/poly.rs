//! Sparse polynomials in `(q, p) ∈ R^{2n}` with float coefficients, used to
//! apply the Langevin generator symbolically.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use super::PoissonCoeffs;

type Exp = Vec<u16>;

/// Variables are ordered `q_1..q_n, p_1..p_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    n: usize,
    terms: BTreeMap<Exp, f64>,
}

impl Poly {
    /// Zero polynomial in `2n` variables.
    pub fn zero(n: usize) -> Self {
        Self { n, terms: BTreeMap::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn unit(&self) -> Exp {
        vec![0; 2 * self.n]
    }

    pub fn add_term(&mut self, e: Exp, c: f64) {
        if c == 0.0 {
            return;
        }
        let slot = self.terms.entry(e).or_insert(0.0);
        *slot += c;
    }

    pub fn constant(n: usize, c: f64) -> Self {
        let mut p = Self::zero(n);
        let e = p.unit();
        p.add_term(e, c);
        p
    }

    /// `Σ a[i][j] q^i p^j` in one dimension.
    pub fn from_table_1d(a: &[Vec<f64>]) -> Self {
        let mut p = Self::zero(1);
        for (i, row) in a.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                p.add_term(vec![i as u16, j as u16], c);
            }
        }
        p
    }

    fn monomial2(&self, a: usize, b: usize) -> Exp {
        let mut e = self.unit();
        e[a] += 1;
        e[b] += 1;
        e
    }

    fn monomial1(&self, a: usize) -> Exp {
        let mut e = self.unit();
        e[a] += 1;
        e
    }

    /// `½qᵀGq + qᵀEp + ½pᵀHp + g·q + h·p − ½(G:Σ + tr H)`.
    pub fn quadratic_ansatz(c: &PoissonCoeffs, sigma: &DMatrix<f64>) -> Self {
        let n = sigma.nrows();
        let mut p = Self::zero(n);
        for i in 0..n {
            for j in 0..n {
                let e = p.monomial2(i, j);
                p.add_term(e, 0.5 * c.g_mat[(i, j)]);
                let e = p.monomial2(i, n + j);
                p.add_term(e, c.e_mat[(i, j)]);
                let e = p.monomial2(n + i, n + j);
                p.add_term(e, 0.5 * c.h_mat[(i, j)]);
            }
            let e = p.monomial1(i);
            p.add_term(e, c.g_vec[i]);
            let e = p.monomial1(n + i);
            p.add_term(e, c.h_vec[i]);
        }
        let gs: f64 = c.g_mat.component_mul(sigma).sum();
        let e = p.unit();
        p.add_term(e, -0.5 * (gs + c.h_mat.trace()));
        p
    }

    /// `½qᵀU₀q + l·q − ½U₀:Σ`, the centred quadratic observable.
    pub fn quadratic_observable(u0: &DMatrix<f64>, l: &[f64], sigma: &DMatrix<f64>) -> Self {
        let n = u0.nrows();
        let mut p = Self::zero(n);
        for i in 0..n {
            for j in 0..n {
                let e = p.monomial2(i, j);
                p.add_term(e, 0.5 * u0[(i, j)]);
            }
            let e = p.monomial1(i);
            p.add_term(e, l[i]);
        }
        let e = p.unit();
        p.add_term(e, -0.5 * u0.component_mul(sigma).sum());
        p
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zero(self.n);
        for (e, c) in &self.terms {
            out.add_term(e.clone(), c * s);
        }
        out
    }

    pub fn add(&self, other: &Poly) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    pub fn sub(&self, other: &Poly) -> Self {
        self.add(&other.scale(-1.0))
    }

    pub fn mul(&self, other: &Poly) -> Self {
        let mut out = Self::zero(self.n);
        for (ea, ca) in &self.terms {
            for (eb, cb) in &other.terms {
                let e: Exp = ea.iter().zip(eb).map(|(a, b)| a + b).collect();
                out.add_term(e, ca * cb);
            }
        }
        out
    }

    /// `∂/∂x_v`.
    pub fn deriv(&self, v: usize) -> Self {
        let mut out = Self::zero(self.n);
        for (e, c) in &self.terms {
            if e[v] > 0 {
                let mut e2 = e.clone();
                e2[v] -= 1;
                out.add_term(e2, c * e[v] as f64);
            }
        }
        out
    }

    /// Multiplication by `x_v`.
    pub fn mul_var(&self, v: usize) -> Self {
        let mut out = Self::zero(self.n);
        for (e, c) in &self.terms {
            let mut e2 = e.clone();
            e2[v] += 1;
            out.add_term(e2, *c);
        }
        out
    }

    /// `Lφ = p·∇_q φ − (Pq)·∇_p φ − (Γp)·∇_p φ + Γ:∇_p²φ` for
    /// `U = ½qᵀPq`, unit mass.
    pub fn generator_gaussian(&self, precision: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Self {
        let n = self.n;
        let mut out = Self::zero(n);
        for i in 0..n {
            out = out.add(&self.deriv(i).mul_var(n + i));
            let dpi = self.deriv(n + i);
            for j in 0..n {
                let pij = precision[(i, j)];
                if pij != 0.0 {
                    out = out.sub(&dpi.mul_var(j).scale(pij));
                }
                let gij = gamma[(i, j)];
                if gij != 0.0 {
                    out = out.sub(&dpi.mul_var(n + j).scale(gij));
                    out = out.add(&dpi.deriv(n + j).scale(gij));
                }
            }
        }
        out
    }

    pub fn max_abs_coeff(&self) -> f64 {
        self.terms.values().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn coeff(&self, e: &[u16]) -> f64 {
        self.terms.get(e).copied().unwrap_or(0.0)
    }

    /// `E[poly(z)]` for `z ~ N(0, cov)` by Isserlis' theorem.
    pub fn gaussian_expectation(&self, cov: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for (e, c) in &self.terms {
            let mut idx = Vec::new();
            for (v, &k) in e.iter().enumerate() {
                for _ in 0..k {
                    idx.push(v);
                }
            }
            total += c * isserlis(&idx, cov);
        }
        total
    }
}

fn isserlis(idx: &[usize], cov: &DMatrix<f64>) -> f64 {
    if idx.is_empty() {
        return 1.0;
    }
    if idx.len() % 2 == 1 {
        return 0.0;
    }
    let a = idx[0];
    let rest = &idx[1..];
    let mut s = 0.0;
    for k in 0..rest.len() {
        let c = cov[(a, rest[k])];
        if c == 0.0 {
            continue;
        }
        let mut sub = Vec::with_capacity(rest.len() - 1);
        sub.extend_from_slice(&rest[..k]);
        sub.extend_from_slice(&rest[k + 1..]);
        s += c * isserlis(&sub, cov);
    }
    s
}

/// `diag(Σ, I)`, the covariance of `(q, p)` under the extended Gaussian.
pub fn block_covariance(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let n = sigma.nrows();
    let mut c = DMatrix::zeros(2 * n, 2 * n);
    c.view_mut((0, 0), (n, n)).copy_from(sigma);
    for i in 0..n {
        c[(n + i, n + i)] = 1.0;
    }
    c
}
