//! Spectral Galerkin solver for the Poisson equation of the Langevin
//! generator on one- and two-dimensional targets.
//!
//! Unknowns are coefficients on the product basis `Ĥ_k(q) H_l(p)`, where
//! `H_l` are normalised probabilists' Hermite polynomials and `Ĥ_k` are
//! polynomials orthonormalised in `L²(π)`. Multi-indices are flattened
//! row-major (first coordinate slowest) and the global index of `(k, l)` is
//! `flat(k) * (K+1)^n + flat(l)`, so the momentum index runs fastest.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::observables::Observable;
use crate::targets::Target;

pub const MAX_DIM: usize = 2;
pub const MAX_DEGREE: usize = 12;
/// Largest accepted `(K+1)^{2n}`; the dense solve is cubic in this.
pub const MAX_UNKNOWNS: usize = 4096;

/// Controls the moment quadrature used to orthonormalise the position basis.
#[derive(Debug, Clone)]
pub struct QuadratureOptions {
    /// Accepted max change of the raw Gram matrix between a grid and its
    /// half-resolution subgrid, relative to its largest entry.
    pub tol: f64,
    /// Required rise of `U` above its minimum on the box boundary.
    pub tail: f64,
    /// Intervals per coordinate on the first level.
    pub initial_intervals: usize,
    /// Cap on the total number of nodes.
    pub max_nodes: usize,
}

impl Default for QuadratureOptions {
    fn default() -> Self {
        QuadratureOptions { tol: 1e-11, tail: 80.0, initial_intervals: 64, max_nodes: 1 << 18 }
    }
}

/// `H_0..=H_k` at `z`, orthonormal under the standard Gaussian.
pub fn hermite_values(z: f64, k: usize, out: &mut [f64]) {
    out[0] = 1.0;
    if k == 0 {
        return;
    }
    out[1] = z;
    for l in 1..k {
        let lf = l as f64;
        out[l + 1] = (z * out[l] - libm::sqrt(lf) * out[l - 1]) / libm::sqrt(lf + 1.0);
    }
}

fn unflatten(mut flat: usize, n: usize, base: usize) -> [usize; MAX_DIM] {
    let mut idx = [0; MAX_DIM];
    for d in (0..n).rev() {
        idx[d] = flat % base;
        flat /= base;
    }
    idx
}

fn flatten(idx: &[usize; MAX_DIM], n: usize, base: usize) -> usize {
    idx[..n].iter().fold(0, |acc, &i| acc * base + i)
}

/// Uniform tensor grid with normalised weights `∝ e^{-U}`.
#[derive(Debug, Clone)]
struct Grid {
    n: usize,
    half_width: f64,
    intervals: usize,
    weights: Vec<f64>,
}

impl Grid {
    fn nodes_per_dim(&self) -> usize {
        self.intervals + 1
    }

    fn coord(&self, j: usize) -> f64 {
        -self.half_width + 2.0 * self.half_width * j as f64 / self.intervals as f64
    }

    fn point(&self, flat: usize, q: &mut [f64]) {
        let idx = unflatten(flat, self.n, self.nodes_per_dim());
        for d in 0..self.n {
            q[d] = self.coord(idx[d]);
        }
    }

    fn len(&self) -> usize {
        self.weights.len()
    }

    /// Weights of the subgrid with every other node, renormalised.
    fn coarse_weights(&self) -> Vec<f64> {
        let m = self.nodes_per_dim();
        let mut w: Vec<f64> = (0..self.len())
            .map(|f| {
                let idx = unflatten(f, self.n, m);
                if idx[..self.n].iter().all(|i| i % 2 == 0) { self.weights[f] } else { 0.0 }
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        w
    }

    fn build(t: &dyn Target, half_width: f64, intervals: usize) -> Result<Grid> {
        let n = t.dim();
        let mut g = Grid { n, half_width, intervals, weights: Vec::new() };
        let total = g.nodes_per_dim().pow(n as u32);
        let mut u = vec![0.0; total];
        let mut q = [0.0; MAX_DIM];
        for (f, uf) in u.iter_mut().enumerate() {
            g.point(f, &mut q[..n]);
            *uf = potential(t, &q[..n])?;
        }
        let umin = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut w: Vec<f64> = u.iter().map(|&x| libm::exp(umin - x)).collect();
        let z: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= z);
        g.weights = w;
        Ok(g)
    }
}

fn potential(t: &dyn Target, q: &[f64]) -> Result<f64> {
    match t.potential(q) {
        Some(u) if u.is_finite() => Ok(u),
        Some(_) => Err(Error::NonFinite { what: "potential", index: 0 }),
        None => Err(Error::Unsupported("potential")),
    }
}

/// Smallest power-of-two box on which `U` rises by `tail` above its minimum
/// along the whole boundary.
fn find_box(t: &dyn Target, tail: f64) -> Result<f64> {
    let n = t.dim();
    let probe = 64;
    let mut r = 1.0;
    while r <= 1024.0 {
        let g = Grid { n, half_width: r, intervals: probe, weights: Vec::new() };
        let m = g.nodes_per_dim();
        let mut q = [0.0; MAX_DIM];
        let mut umin = f64::INFINITY;
        let mut edge_min = f64::INFINITY;
        for f in 0..m.pow(n as u32) {
            g.point(f, &mut q[..n]);
            let u = potential(t, &q[..n])?;
            umin = umin.min(u);
            let idx = unflatten(f, n, m);
            if idx[..n].iter().any(|&i| i == 0 || i == probe) {
                edge_min = edge_min.min(u);
            }
        }
        if edge_min - umin > tail {
            return Ok(r);
        }
        r *= 2.0;
    }
    Err(Error::Accuracy(format!("potential does not rise by {tail} within the box [-1024, 1024]^{n}")))
}

/// Orthonormal product basis in `(q, p)` with its moment tables.
#[derive(Debug, Clone)]
pub struct HermiteBasis {
    n: usize,
    k_max: usize,
    center: [f64; MAX_DIM],
    scale: [f64; MAX_DIM],
    grid: Grid,
    raw_gram: DMatrix<f64>,
    gram: DMatrix<f64>,
    alpha: DMatrix<f64>,
    /// `deriv[i][(a, b)] = ⟨∂_{q_i} Ĥ_a, Ĥ_b⟩_π`.
    deriv: Vec<DMatrix<f64>>,
}

impl HermiteBasis {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn max_degree(&self) -> usize {
        self.k_max
    }

    /// Number of one-sided basis functions, `(K+1)^n`.
    pub fn side_len(&self) -> usize {
        (self.k_max + 1).pow(self.n as u32)
    }

    /// Total number of unknowns, `(K+1)^{2n}`.
    pub fn len(&self) -> usize {
        self.side_len() * self.side_len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Global index of `(k, l)`.
    pub fn index(&self, k: &[usize], l: &[usize]) -> usize {
        let b = self.k_max + 1;
        let mut ki = [0; MAX_DIM];
        let mut li = [0; MAX_DIM];
        ki[..self.n].copy_from_slice(k);
        li[..self.n].copy_from_slice(l);
        flatten(&ki, self.n, b) * self.side_len() + flatten(&li, self.n, b)
    }

    /// Gram-Schmidt coefficients: `Ĥ_a = Σ_k alpha[(a, k)] B_k` with `B_k` the
    /// Hermite products in standardised coordinates.
    pub fn alpha(&self) -> &DMatrix<f64> {
        &self.alpha
    }

    /// `⟨∂_{q_i} Ĥ_a, Ĥ_b⟩_π`.
    pub fn derivative_moments(&self, i: usize) -> &DMatrix<f64> {
        &self.deriv[i]
    }

    /// Gram matrix of the orthonormalised position basis.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// Standardisation `(q - center) / scale` used for the raw polynomials.
    pub fn standardisation(&self) -> (&[f64], &[f64]) {
        (&self.center[..self.n], &self.scale[..self.n])
    }

    fn raw_values(&self, q: &[f64], table: &mut [[f64; MAX_DEGREE + 1]; MAX_DIM], out: &mut [f64]) {
        for d in 0..self.n {
            hermite_values((q[d] - self.center[d]) / self.scale[d], self.k_max, &mut table[d]);
        }
        let b = self.k_max + 1;
        for (f, o) in out.iter_mut().enumerate() {
            let idx = unflatten(f, self.n, b);
            *o = (0..self.n).map(|d| table[d][idx[d]]).product();
        }
    }

    fn raw_gram_with(&self, weights: &[f64]) -> DMatrix<f64> {
        let nb = self.side_len();
        let chunk = 512;
        let mut gram = DMatrix::zeros(nb, nb);
        let mut rows = DMatrix::zeros(chunk, nb);
        let mut table = [[0.0; MAX_DEGREE + 1]; MAX_DIM];
        let mut vals = vec![0.0; nb];
        let mut q = [0.0; MAX_DIM];
        let total = self.grid.len();
        let mut start = 0;
        while start < total {
            let end = (start + chunk).min(total);
            rows.fill(0.0);
            for f in start..end {
                let w = weights[f];
                if w == 0.0 {
                    continue;
                }
                self.grid.point(f, &mut q[..self.n]);
                self.raw_values(&q[..self.n], &mut table, &mut vals);
                let sw = libm::sqrt(w);
                for (c, v) in vals.iter().enumerate() {
                    rows[(f - start, c)] = sw * v;
                }
            }
            gram.gemm_tr(1.0, &rows, &rows, 1.0);
            start = end;
        }
        gram
    }

    fn raw_projection_with(&self, f: &Observable, weights: &[f64]) -> (f64, DVector<f64>) {
        let nb = self.side_len();
        let mut table = [[0.0; MAX_DEGREE + 1]; MAX_DIM];
        let mut vals = vec![0.0; nb];
        let mut q = [0.0; MAX_DIM];
        let mut mean = 0.0;
        let mut proj = DVector::zeros(nb);
        for (p, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            self.grid.point(p, &mut q[..self.n]);
            let fv = f.eval(&q[..self.n]);
            mean += w * fv;
            self.raw_values(&q[..self.n], &mut table, &mut vals);
            for (c, v) in vals.iter().enumerate() {
                proj[c] += w * fv * v;
            }
        }
        (mean, proj)
    }

    /// `(π(f), ⟨f − π(f), Ĥ_a⟩_π)` for every position basis function.
    pub fn project(&self, f: &Observable) -> Result<(f64, DVector<f64>)> {
        f.validate(self.n)?;
        let (mean, raw) = self.raw_projection_with(f, &self.grid.weights);
        let (mean_c, raw_c) = self.raw_projection_with(f, &self.grid.coarse_weights());
        let scale = 1.0 + raw.amax() + mean.abs();
        let change = (&raw - &raw_c).amax().max((mean - mean_c).abs());
        if !(change <= 1e-8 * scale) {
            return Err(Error::Accuracy(format!("projection of the observable changed by {change:e} under refinement")));
        }
        let mut coeffs = &self.alpha * raw;
        // Ĥ_0 is the constant 1.
        coeffs[0] -= mean;
        Ok((mean, coeffs))
    }
}

/// Builds the product basis of maximal degree `k_max` per coordinate for `t`.
pub fn build_basis(t: &dyn Target, k_max: usize, opts: &QuadratureOptions) -> Result<HermiteBasis> {
    let n = t.dim();
    if n == 0 || n > MAX_DIM {
        return Err(Error::UnsupportedCase(format!("spectral solver handles dimension 1 or 2, got {n}")));
    }
    if k_max > MAX_DEGREE {
        return Err(Error::UnsupportedCase(format!("degree {k_max} exceeds {MAX_DEGREE}")));
    }
    let unknowns = (k_max + 1).pow(2 * n as u32);
    if unknowns > MAX_UNKNOWNS {
        return Err(Error::UnsupportedCase(format!("{unknowns} unknowns exceed the cap of {MAX_UNKNOWNS}")));
    }
    let half_width = find_box(t, opts.tail)?;
    let mut intervals = opts.initial_intervals.max(4) & !1;
    let mut basis: Option<HermiteBasis> = None;
    loop {
        if (intervals + 1).pow(n as u32) > opts.max_nodes {
            return Err(Error::Accuracy(format!(
                "Gram matrix not converged with {} nodes per coordinate",
                intervals / 2 + 1
            )));
        }
        let grid = Grid::build(t, half_width, intervals)?;
        let (center, scale) = match &basis {
            Some(b) => (b.center, b.scale),
            None => grid_standardisation(&grid),
        };
        let mut b = HermiteBasis {
            n,
            k_max,
            center,
            scale,
            grid,
            raw_gram: DMatrix::zeros(0, 0),
            gram: DMatrix::zeros(0, 0),
            alpha: DMatrix::zeros(0, 0),
            deriv: Vec::new(),
        };
        let fine = b.raw_gram_with(&b.grid.weights);
        let coarse = b.raw_gram_with(&b.grid.coarse_weights());
        let change = (&fine - &coarse).amax();
        b.raw_gram = fine;
        if change <= opts.tol * b.raw_gram.amax().max(1.0) {
            finish_basis(&mut b)?;
            return Ok(b);
        }
        basis = Some(b);
        intervals *= 2;
    }
}

fn grid_standardisation(grid: &Grid) -> ([f64; MAX_DIM], [f64; MAX_DIM]) {
    let n = grid.n;
    let mut mean = [0.0; MAX_DIM];
    let mut second = [0.0; MAX_DIM];
    let mut q = [0.0; MAX_DIM];
    for (f, &w) in grid.weights.iter().enumerate() {
        grid.point(f, &mut q[..n]);
        for d in 0..n {
            mean[d] += w * q[d];
            second[d] += w * q[d] * q[d];
        }
    }
    let mut scale = [1.0; MAX_DIM];
    for d in 0..n {
        let var = second[d] - mean[d] * mean[d];
        if var > 0.0 {
            scale[d] = libm::sqrt(var);
        }
    }
    (mean, scale)
}

fn finish_basis(b: &mut HermiteBasis) -> Result<()> {
    let nb = b.side_len();
    let n = b.n;
    let base = b.k_max + 1;
    // Weighted QR of the sampled raw basis: Householder keeps orthonormality
    // where a Cholesky factor of the Gram matrix would square its condition.
    let wmax = b.grid.weights.iter().cloned().fold(0.0, f64::max);
    let kept: Vec<usize> = (0..b.grid.len()).filter(|&f| b.grid.weights[f] > 1e-32 * wmax).collect();
    let rows = kept.len();
    if rows < nb {
        return Err(Error::Accuracy("too few effective quadrature nodes for the basis".into()));
    }
    let mut vals = DMatrix::zeros(rows, nb);
    let mut dvals: Vec<DMatrix<f64>> = (0..n).map(|_| DMatrix::zeros(rows, nb)).collect();
    let mut table = [[0.0; MAX_DEGREE + 1]; MAX_DIM];
    let mut raw = vec![0.0; nb];
    let mut q = [0.0; MAX_DIM];
    for (r, &f) in kept.iter().enumerate() {
        b.grid.point(f, &mut q[..n]);
        b.raw_values(&q[..n], &mut table, &mut raw);
        let sw = libm::sqrt(b.grid.weights[f]);
        for k in 0..nb {
            vals[(r, k)] = sw * raw[k];
            let idx = unflatten(k, n, base);
            for (i, dv) in dvals.iter_mut().enumerate() {
                // ∂_i B_k = √k_i / s_i · B_{k − e_i}
                if idx[i] > 0 {
                    let mut lower = idx;
                    lower[i] -= 1;
                    dv[(r, k)] = sw * libm::sqrt(idx[i] as f64) / b.scale[i] * raw[flatten(&lower, n, base)];
                }
            }
        }
    }
    let mut upper = vals.clone().qr().r();
    for k in 0..nb {
        if upper[(k, k)] < 0.0 {
            upper.row_mut(k).neg_mut();
        }
    }
    let inv = upper
        .solve_upper_triangular(&DMatrix::identity(nb, nb))
        .ok_or_else(|| Error::Numeric("position basis is linearly dependent under the target".into()))?;
    let hat = &vals * &inv;
    b.gram = hat.transpose() * &hat;
    let err = (&b.gram - DMatrix::identity(nb, nb)).amax();
    if !(err <= 1e-8) {
        return Err(Error::Accuracy(format!("orthonormalised basis deviates from identity by {err:e}")));
    }
    b.deriv = dvals.iter().map(|dv| (dv * &inv).transpose() * &hat).collect();
    b.alpha = inv.transpose();
    Ok(())
}

/// The negative generator projected onto the basis, split into its
/// antisymmetric transport part and its symmetric friction part.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    side: usize,
    gamma: SymMatrix,
    transport: DMatrix<f64>,
    dissipative: DMatrix<f64>,
}

impl GeneratorMatrix {
    pub fn transport(&self) -> &DMatrix<f64> {
        &self.transport
    }

    pub fn dissipative(&self) -> &DMatrix<f64> {
        &self.dissipative
    }

    pub fn gamma(&self) -> &SymMatrix {
        &self.gamma
    }

    pub fn full(&self) -> DMatrix<f64> {
        &self.transport + &self.dissipative
    }

    pub fn len(&self) -> usize {
        self.side * self.side
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Writes the full matrix as `row,col,value` lines, skipping zeros.
    pub fn write_csv<W: fmt::Write>(&self, w: &mut W) -> fmt::Result {
        writeln!(w, "row,col,value")?;
        let full = self.full();
        for r in 0..full.nrows() {
            for c in 0..full.ncols() {
                let v = full[(r, c)];
                if v != 0.0 {
                    writeln!(w, "{r},{c},{v:.16e}")?;
                }
            }
        }
        Ok(())
    }
}

/// Momentum block of the friction part for the coefficient function `g(i, j)`.
fn momentum_friction(n: usize, k_max: usize, g: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let base = k_max + 1;
    let np = base.pow(n as u32);
    let mut block = DMatrix::zeros(np, np);
    for lhat in 0..np {
        let lh = unflatten(lhat, n, base);
        for i in 0..n {
            if lh[i] == 0 {
                continue;
            }
            for j in 0..n {
                let mut l = lh;
                l[i] -= 1;
                if l[j] == k_max {
                    continue;
                }
                l[j] += 1;
                let c = g(i, j);
                if c != 0.0 {
                    block[(flatten(&l, n, base), lhat)] += libm::sqrt((lh[i] * l[j]) as f64) * c;
                }
            }
        }
    }
    block
}

fn kron_identity(side: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    let np = block.nrows();
    let mut out = DMatrix::zeros(side * np, side * np);
    for k in 0..side {
        out.view_mut((k * np, k * np), (np, np)).copy_from(block);
    }
    out
}

/// Projects the negative generator with friction `gamma` onto `basis`.
pub fn assemble(basis: &HermiteBasis, gamma: &SymMatrix) -> Result<GeneratorMatrix> {
    let n = basis.n;
    if gamma.dim() != n {
        return Err(Error::Dimension(format!("friction is {0}x{0}, basis dimension {n}", gamma.dim())));
    }
    let base = basis.k_max + 1;
    let side = basis.side_len();
    let total = side * side;
    let mut transport = DMatrix::zeros(total, total);
    for k in 0..side {
        for l in 0..side {
            let row = k * side + l;
            let li = unflatten(l, n, base);
            for i in 0..n {
                // −√l_i ⟨Ĥ_k, ∂_i Ĥ_k̂⟩ at l̂ = l − e_i
                if li[i] > 0 {
                    let mut lh = li;
                    lh[i] -= 1;
                    let c = libm::sqrt(li[i] as f64);
                    let col_l = flatten(&lh, n, base);
                    for kh in 0..side {
                        transport[(row, kh * side + col_l)] -= c * basis.deriv[i][(kh, k)];
                    }
                }
                // +√l̂_i ⟨∂_i Ĥ_k, Ĥ_k̂⟩ at l̂ = l + e_i
                if li[i] < basis.k_max {
                    let mut lh = li;
                    lh[i] += 1;
                    let c = libm::sqrt(lh[i] as f64);
                    let col_l = flatten(&lh, n, base);
                    for kh in 0..side {
                        transport[(row, kh * side + col_l)] += c * basis.deriv[i][(k, kh)];
                    }
                }
            }
        }
    }
    let block = momentum_friction(n, basis.k_max, |i, j| gamma.get(i, j));
    Ok(GeneratorMatrix { side, gamma: gamma.clone(), transport, dissipative: kron_identity(side, &block) })
}

/// Coefficients of the Galerkin Poisson solution; entry 0 is pinned to zero.
#[derive(Debug, Clone)]
pub struct GalerkinSolution {
    pub coeffs: DVector<f64>,
    pub rhs: DVector<f64>,
    pub mean: f64,
    pub residual: f64,
}

impl GalerkinSolution {
    pub fn write_csv<W: fmt::Write>(&self, basis: &HermiteBasis, w: &mut W) -> fmt::Result {
        let n = basis.n;
        let base = basis.k_max + 1;
        let side = basis.side_len();
        writeln!(w, "index,k,l,coefficient")?;
        for (g, c) in self.coeffs.iter().enumerate() {
            let k = unflatten(g / side, n, base);
            let l = unflatten(g % side, n, base);
            let fmt_idx = |idx: [usize; MAX_DIM]| {
                idx[..n].iter().map(|i| format!("{i}")).collect::<Vec<_>>().join(":")
            };
            writeln!(w, "{g},{},{},{c:.16e}", fmt_idx(k), fmt_idx(l))?;
        }
        Ok(())
    }
}

struct Reduced {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Reduced {
    fn new(a: &DMatrix<f64>) -> Reduced {
        let m = a.nrows() - 1;
        Reduced { lu: a.view((1, 1), (m, m)).clone_owned().lu() }
    }

    fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let m = rhs.len() - 1;
        let r = rhs.rows(1, m).clone_owned();
        let x = self.lu.solve(&r).ok_or_else(|| Error::Numeric("reduced generator matrix is singular".into()))?;
        let mut full = DVector::zeros(m + 1);
        full.rows_mut(1, m).copy_from(&x);
        if full.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite Galerkin coefficients".into()));
        }
        Ok(full)
    }
}

fn residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let m = a.nrows() - 1;
    let ax = a.view((1, 1), (m, m)) * x.rows(1, m);
    (ax - b.rows(1, m)).amax()
}

fn solve_with(gen: &GeneratorMatrix, basis: &HermiteBasis, f: &Observable) -> Result<(GalerkinSolution, Reduced, DMatrix<f64>)> {
    let (mean, proj) = basis.project(f)?;
    let side = basis.side_len();
    let mut rhs = DVector::zeros(side * side);
    for k in 0..side {
        rhs[k * side] = proj[k];
    }
    rhs[0] = 0.0;
    let a = gen.full();
    let red = Reduced::new(&a);
    let coeffs = red.solve(&rhs)?;
    let res = residual(&a, &coeffs, &rhs);
    let scale = 1.0 + rhs.amax();
    if !(res <= 1e-8 * scale) {
        return Err(Error::Numeric(format!("Galerkin residual {res:e} above tolerance")));
    }
    Ok((GalerkinSolution { coeffs, rhs, mean, residual: res }, red, a))
}

/// Solves the projected Poisson equation for the centred observable.
pub fn solve(gen: &GeneratorMatrix, basis: &HermiteBasis, f: &Observable) -> Result<GalerkinSolution> {
    if gen.side != basis.side_len() {
        return Err(Error::Dimension("generator and basis sizes differ".into()));
    }
    solve_with(gen, basis, f).map(|(s, _, _)| s)
}

/// Asymptotic variance `2 φᵀ D φ` with `D` the friction part.
pub fn variance(gen: &GeneratorMatrix, sol: &GalerkinSolution) -> f64 {
    2.0 * sol.coeffs.dot(&(&gen.dissipative * &sol.coeffs))
}

/// `∫ ∇_p φ ⊗ ∇_p φ̃ dπ̃` with `φ̃(q, p) = φ(q, −p)`.
pub fn delta_gamma(basis: &HermiteBasis, sol: &GalerkinSolution) -> SymMatrix {
    let n = basis.n;
    let base = basis.k_max + 1;
    let side = basis.side_len();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..side {
        for l in 0..side {
            let li = unflatten(l, n, base);
            let phi = sol.coeffs[k * side + l];
            if phi == 0.0 {
                continue;
            }
            let sign = if li[..n].iter().sum::<usize>() % 2 == 0 { 1.0 } else { -1.0 };
            for i in 0..n {
                if li[i] == 0 {
                    continue;
                }
                for j in 0..n {
                    let mut lj = li;
                    lj[i] -= 1;
                    if lj[j] == basis.k_max {
                        continue;
                    }
                    lj[j] += 1;
                    let other = sol.coeffs[k * side + flatten(&lj, n, base)];
                    out[(i, j)] += sign * phi * other * libm::sqrt((li[i] * lj[j]) as f64);
                }
            }
        }
    }
    SymMatrix::new(0.5 * (&out + out.transpose())).expect("square by construction")
}

/// Exact gradient of the discretised variance with respect to the friction
/// entries: `dσ² = Σ_ij G_ij δΓ_ij` for symmetric `δΓ`.
pub fn variance_gradient(basis: &HermiteBasis, gamma: &SymMatrix, f: &Observable) -> Result<SymMatrix> {
    let gen = assemble(basis, gamma)?;
    let (sol, red, _) = solve_with(&gen, basis, f)?;
    let n = basis.n;
    let phi = &sol.coeffs;
    let d_phi = &gen.dissipative * phi;
    let mut out = DMatrix::zeros(n, n);
    for a in 0..n {
        for b in a..n {
            let block = momentum_friction(n, basis.k_max, |i, j| if i == a && j == b { 1.0 } else { 0.0 });
            let dd = kron_identity(basis.side_len(), &block);
            let dd_phi = &dd * phi;
            let mut rhs = -&dd_phi;
            rhs[0] = 0.0;
            let dphi = red.solve(&rhs)?;
            let g = 2.0 * (phi.dot(&dd_phi) + 2.0 * dphi.dot(&d_phi));
            out[(a, b)] = g;
            out[(b, a)] = g;
        }
    }
    SymMatrix::new(out)
}
