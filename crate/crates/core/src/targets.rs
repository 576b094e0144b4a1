//! Potentials `U` with gradients and, where cheap, Hessian-vector products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, DVectorView, DVectorViewMut};

use crate::error::{Error, Result};
use crate::linalg::{sqrt_and_inv_sqrt, SymMatrix};
use crate::rng::RngStream;

/// A smooth potential on `R^n`.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    /// `U(q)`, or `None` when the potential is only known through its gradient.
    fn potential(&self, q: &[f64]) -> Option<f64>;

    /// Writes `∇U(q)` into `out`. No finiteness check; see [`gradient`].
    fn gradient_into(&self, q: &[f64], out: &mut [f64]);

    fn has_hessian(&self) -> bool {
        false
    }

    /// Writes `D²U(q) v` into `out`.
    fn hessian_vec_into(&self, _q: &[f64], _v: &[f64], _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported("hessian_vec"))
    }

    fn has_minibatch(&self) -> bool {
        false
    }

    /// Stochastic gradient with a freshly drawn batch.
    fn minibatch_gradient_into(&self, _q: &[f64], _rng: &mut RngStream, _out: &mut [f64]) -> Result<()> {
        Err(Error::Unsupported("minibatch_gradient"))
    }
}

fn check_finite(what: &'static str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { what, index }),
        None => Ok(()),
    }
}

fn check_dim(t: &dyn Target, len: usize) -> Result<()> {
    if len != t.dim() {
        return Err(Error::Dimension(format!("target has dimension {}, got {len}", t.dim())));
    }
    Ok(())
}

/// `∇U(q)` with dimension and finiteness checks.
pub fn gradient(t: &dyn Target, q: &[f64]) -> Result<Vec<f64>> {
    check_dim(t, q.len())?;
    check_finite("position", q)?;
    let mut out = vec![0.0; q.len()];
    t.gradient_into(q, &mut out);
    check_finite("gradient", &out)?;
    Ok(out)
}

/// `D²U(q) v` with checks.
pub fn hessian_vec(t: &dyn Target, q: &[f64], v: &[f64]) -> Result<Vec<f64>> {
    check_dim(t, q.len())?;
    check_dim(t, v.len())?;
    let mut out = vec![0.0; q.len()];
    t.hessian_vec_into(q, v, &mut out)?;
    check_finite("hessian-vector product", &out)?;
    Ok(out)
}

/// `U(q) = ½ qᵀ P q` for an SPD precision `P`.
#[derive(Debug, Clone)]
pub struct GaussianTarget {
    precision: SymMatrix,
}

impl GaussianTarget {
    pub fn new(precision: SymMatrix) -> Result<Self> {
        let lmin = precision.min_eigenvalue()?;
        if !(lmin > 0.0) {
            return Err(Error::Config(format!("precision not positive definite (eigenvalue {lmin})")));
        }
        Ok(Self { precision })
    }

    /// Isotropic 1D-style target with precision `v0 · I_n`.
    pub fn isotropic(n: usize, v0: f64) -> Result<Self> {
        Self::new(SymMatrix::scaled_identity(n, v0))
    }

    pub fn precision(&self) -> &SymMatrix {
        &self.precision
    }

    /// Covariance `P⁻¹`.
    pub fn covariance(&self) -> Result<SymMatrix> {
        self.precision.map_spectrum(|l| 1.0 / l)
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.precision.dim()
    }

    fn potential(&self, q: &[f64]) -> Option<f64> {
        let qv = DVectorView::from_slice(q, q.len());
        Some(0.5 * qv.dot(&(self.precision.as_matrix() * qv)))
    }

    fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        let n = q.len();
        let qv = DVectorView::from_slice(q, n);
        let mut o = DVectorViewMut::from_slice(out, n);
        o.gemv(1.0, self.precision.as_matrix(), &qv, 0.0);
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_vec_into(&self, _q: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        self.gradient_into(v, out);
        Ok(())
    }
}

/// Discretised Brownian-bridge target: a Gaussian whose precision is
/// tridiagonal with diagonal `2/δ + δ/4` and off-diagonal `-1/δ`.
#[derive(Debug, Clone)]
pub struct BridgeTarget {
    n: usize,
    delta: f64,
    inner: GaussianTarget,
}

impl BridgeTarget {
    pub fn new(n: usize, delta: f64) -> Result<Self> {
        if n == 0 || !(delta > 0.0) {
            return Err(Error::Config(format!("bridge needs n>0 and δ>0, got n={n}, δ={delta}")));
        }
        let d = 2.0 / delta + delta / 4.0;
        let o = -1.0 / delta;
        let p = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                d
            } else if i.abs_diff(j) == 1 {
                o
            } else {
                0.0
            }
        });
        Ok(Self { n, delta, inner: GaussianTarget::new(SymMatrix::new(p)?)? })
    }

    pub fn grid_size(&self) -> f64 {
        self.delta
    }

    pub fn gaussian(&self) -> &GaussianTarget {
        &self.inner
    }
}

impl Target for BridgeTarget {
    fn dim(&self) -> usize {
        self.n
    }

    fn potential(&self, q: &[f64]) -> Option<f64> {
        self.inner.potential(q)
    }

    fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        let d = 2.0 / self.delta + self.delta / 4.0;
        let o = -1.0 / self.delta;
        let n = self.n;
        for i in 0..n {
            let mut g = d * q[i];
            if i > 0 {
                g += o * q[i - 1];
            }
            if i + 1 < n {
                g += o * q[i + 1];
            }
            out[i] = g;
        }
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_vec_into(&self, _q: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        self.gradient_into(v, out);
        Ok(())
    }
}

/// Separable tilted double well `U(q) = Σ_i q_i⁴/4 − q_i² + q_i/2`.
#[derive(Debug, Clone)]
pub struct DoubleWellTarget {
    n: usize,
}

impl DoubleWellTarget {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Target for DoubleWellTarget {
    fn dim(&self) -> usize {
        self.n
    }

    fn potential(&self, q: &[f64]) -> Option<f64> {
        Some(q.iter().map(|&x| 0.25 * x * x * x * x - x * x + 0.5 * x).sum())
    }

    fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        for (o, &x) in out.iter_mut().zip(q) {
            *o = x * x * x - 2.0 * x + 0.5;
        }
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_vec_into(&self, q: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        for ((o, &x), &w) in out.iter_mut().zip(q).zip(v) {
            *o = (3.0 * x * x - 2.0) * w;
        }
        Ok(())
    }
}

/// How the logistic scale `c` is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogisticScale {
    /// `c̄ = 5 / max_i (Σ^{1/2} Σ_j X_j Y_j)_i`.
    Auto,
    Fixed(f64),
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

fn log1p_exp(z: f64) -> f64 {
    if z > 0.0 {
        z + libm::log1p(libm::exp(-z))
    } else {
        libm::log1p(libm::exp(z))
    }
}

/// Bayesian logistic regression posterior in whitened coordinates
/// `β̂ = Σ^{-1/2} β`, with Gaussian prior `N(0, Σ)`.
///
/// `∇U(β̂) = β̂ − Σ^{1/2} Σ_i c X_i (Y_i − ρ(c (Σ^{1/2} β̂)ᵀ X_i))`.
#[derive(Debug, Clone)]
pub struct LogisticTarget {
    /// Rows are `Σ^{1/2} X_i`.
    z: DMatrix<f64>,
    y: Vec<f64>,
    prior_precision: SymMatrix,
    precond: SymMatrix,
    c_bar: f64,
    c: f64,
    batch: Option<usize>,
}

impl LogisticTarget {
    /// `x` is `p × n` (one datapoint per row); labels must be 0 or 1.
    /// Without an explicit prior precision, `(1/p) Σ X_i X_iᵀ` is used.
    pub fn new(
        x: DMatrix<f64>,
        y: Vec<f64>,
        scale: LogisticScale,
        prior_precision: Option<SymMatrix>,
    ) -> Result<Self> {
        let (p, n) = x.shape();
        if p == 0 || n == 0 {
            return Err(Error::Data("logistic target needs at least one row and column".into()));
        }
        if y.len() != p {
            return Err(Error::Dimension(format!("{p} feature rows but {} labels", y.len())));
        }
        if let Some(i) = y.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("label {} at row {i} is not 0/1", y[i])));
        }
        check_finite("features", x.as_slice())?;
        let prior = match prior_precision {
            Some(pp) => {
                if pp.dim() != n {
                    return Err(Error::Dimension(format!("prior is {}x{0}, features have {n} columns", pp.dim())));
                }
                pp
            }
            None => SymMatrix::new(x.transpose() * &x / p as f64)?,
        };
        // Σ^{1/2} = (Σ^{-1})^{-1/2}
        let (_, precond) = sqrt_and_inv_sqrt(&prior)?;
        let z = &x * precond.as_matrix();
        let xy = z.transpose() * DVector::from_column_slice(&y);
        let mx = xy.max();
        let c_bar = if mx > 0.0 && mx.is_finite() { 5.0 / mx } else { f64::NAN };
        let c = match scale {
            LogisticScale::Auto => {
                if !c_bar.is_finite() {
                    return Err(Error::Data("auto scale undefined: max of Σ^{1/2}Σ X_j Y_j is not positive".into()));
                }
                c_bar
            }
            LogisticScale::Fixed(c) if c > 0.0 => c,
            LogisticScale::Fixed(c) => return Err(Error::Config(format!("scale c must be positive, got {c}"))),
        };
        Ok(Self { z, y, prior_precision: prior, precond, c_bar, c, batch: None })
    }

    /// Switches to minibatches of `m` points: the likelihood sum is replaced
    /// by `(p/m)` times a sum over a fresh batch, and `c` becomes `c·m/p`.
    pub fn with_minibatch(mut self, m: usize) -> Result<Self> {
        let p = self.num_points();
        if m == 0 || m > p {
            return Err(Error::Config(format!("minibatch size must be in 1..={p}, got {m}")));
        }
        self.c *= m as f64 / p as f64;
        self.batch = Some(m);
        Ok(self)
    }

    pub fn num_points(&self) -> usize {
        self.z.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.c
    }

    pub fn auto_scale(&self) -> f64 {
        self.c_bar
    }

    pub fn batch_size(&self) -> Option<usize> {
        self.batch
    }

    pub fn prior_precision(&self) -> &SymMatrix {
        &self.prior_precision
    }

    /// `Σ^{1/2}`, mapping whitened `β̂` back to `β`.
    pub fn preconditioner(&self) -> &SymMatrix {
        &self.precond
    }

    /// `(p/m) Σ_{i∈batch}` likelihood term plus the exact prior term.
    pub fn minibatch_gradient_with(&self, q: &[f64], batch: &[usize], out: &mut [f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Config("empty minibatch".into()));
        }
        let p = self.num_points();
        let w = p as f64 / batch.len() as f64;
        out.copy_from_slice(q);
        for &i in batch {
            let row = self.z.row(i);
            let s: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum();
            let r = w * self.c * (self.y[i] - sigmoid(self.c * s));
            for (o, a) in out.iter_mut().zip(row.iter()) {
                *o -= r * a;
            }
        }
        Ok(())
    }
}

impl Target for LogisticTarget {
    fn dim(&self) -> usize {
        self.z.ncols()
    }

    fn potential(&self, q: &[f64]) -> Option<f64> {
        let qv = DVectorView::from_slice(q, q.len());
        let s = &self.z * qv;
        let mut u = 0.5 * qv.dot(&qv);
        for (si, yi) in s.iter().zip(&self.y) {
            u += log1p_exp(self.c * si) - self.c * yi * si;
        }
        Some(u)
    }

    fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
        let n = q.len();
        let qv = DVectorView::from_slice(q, n);
        let mut s = &self.z * qv;
        for (si, yi) in s.iter_mut().zip(&self.y) {
            *si = self.c * (yi - sigmoid(self.c * *si));
        }
        out.copy_from_slice(q);
        let mut o = DVectorViewMut::from_slice(out, n);
        o.gemv_tr(-1.0, &self.z, &s, 1.0);
    }

    fn has_hessian(&self) -> bool {
        true
    }

    fn hessian_vec_into(&self, q: &[f64], v: &[f64], out: &mut [f64]) -> Result<()> {
        let n = q.len();
        let qv = DVectorView::from_slice(q, n);
        let vv = DVectorView::from_slice(v, n);
        let s = &self.z * qv;
        let mut zv = &self.z * vv;
        for (w, si) in zv.iter_mut().zip(s.iter()) {
            let r = sigmoid(self.c * si);
            *w *= self.c * self.c * r * (1.0 - r);
        }
        out.copy_from_slice(v);
        let mut o = DVectorViewMut::from_slice(out, n);
        o.gemv_tr(1.0, &self.z, &zv, 1.0);
        Ok(())
    }

    fn has_minibatch(&self) -> bool {
        self.batch.is_some()
    }

    fn minibatch_gradient_into(&self, q: &[f64], rng: &mut RngStream, out: &mut [f64]) -> Result<()> {
        let m = self.batch.ok_or(Error::Unsupported("minibatch_gradient"))?;
        let batch = rng.sample_indices(self.num_points(), m);
        self.minibatch_gradient_with(q, &batch, out)
    }
}

/// Synthetic logistic-regression data: standard normal features with a
/// constant first column, labels drawn from a logistic model with
/// coefficients `N(0, 1/n)`.
pub fn synthetic_logistic_data(n: usize, p: usize, rng: &mut RngStream) -> (DMatrix<f64>, Vec<f64>) {
    let mut beta = vec![0.0; n];
    rng.fill_normal(&mut beta);
    let s = 1.0 / libm::sqrt(n as f64);
    for b in &mut beta {
        *b *= s;
    }
    let mut x = DMatrix::zeros(p, n);
    let mut y = Vec::with_capacity(p);
    for i in 0..p {
        let mut dot = 0.0;
        for j in 0..n {
            let v = if j == 0 { 1.0 } else { rng.normal() };
            x[(i, j)] = v;
            dot += v * beta[j];
        }
        y.push(if rng.uniform() < sigmoid(2.0 * dot) { 1.0 } else { 0.0 });
    }
    (x, y)
}
