//! Closed forms for Gaussian targets: quadratic Poisson solutions, their
//! asymptotic variances and optimal frictions, and an exact polynomial
//! Poisson solver for one-dimensional polynomial observables.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{project_pd, FrictionMatrix, SymMatrix};

pub mod poly;

const COMMUTE_TOL: f64 = 1e-10;

fn commutator_norm(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a * b - b * a).amax()
}

/// Gaussian target `N(0, Σ)`, unit mass, observable `½ qᵀU₀q + l·q` and
/// constant friction `Γ`.
#[derive(Debug, Clone)]
pub struct GaussianCase {
    pub sigma: SymMatrix,
    pub u0: SymMatrix,
    pub l: Vec<f64>,
    pub gamma: FrictionMatrix,
}

/// Coefficients of `φ = ½qᵀGq + qᵀEp + ½pᵀHp + g·q + h·p − ½(G:Σ + H:I)`.
#[derive(Debug, Clone)]
pub struct PoissonCoeffs {
    pub g_mat: DMatrix<f64>,
    pub e_mat: DMatrix<f64>,
    pub h_mat: DMatrix<f64>,
    pub g_vec: DVector<f64>,
    pub h_vec: DVector<f64>,
}

impl PoissonCoeffs {
    /// The constant making `φ` centred under the Gaussian.
    pub fn offset(&self, sigma: &SymMatrix) -> f64 {
        let gs: f64 = self.g_mat.component_mul(sigma.as_matrix()).sum();
        -0.5 * (gs + self.h_mat.trace())
    }
}

impl GaussianCase {
    pub fn new(sigma: SymMatrix, u0: SymMatrix, l: Vec<f64>, gamma: FrictionMatrix) -> Result<Self> {
        let n = sigma.dim();
        if u0.dim() != n || l.len() != n || gamma.dim() != n {
            return Err(Error::Dimension(format!(
                "Σ is {n}x{n}, U₀ is {0}x{0}, l has {1}, Γ is {2}x{2}",
                u0.dim(),
                l.len(),
                gamma.dim()
            )));
        }
        if !(sigma.min_eigenvalue()? > 0.0) {
            return Err(Error::Config("Σ must be positive definite".into()));
        }
        Ok(Self { sigma, u0, l, gamma })
    }

    pub fn dim(&self) -> usize {
        self.sigma.dim()
    }

    fn scale(&self) -> f64 {
        let s = self.sigma.max_abs().max(self.u0.max_abs()).max(self.gamma.mat().max_abs());
        (s * s).max(1.0)
    }

    /// `ΣU₀ = U₀Σ` within tolerance.
    pub fn sigma_commutes_with_u0(&self) -> bool {
        commutator_norm(self.sigma.as_matrix(), self.u0.as_matrix()) <= COMMUTE_TOL * self.scale()
    }

    /// `Σ`, `U₀` and `Γ` pairwise commute.
    pub fn is_commuting(&self) -> bool {
        let s = self.sigma.as_matrix();
        let u = self.u0.as_matrix();
        let g = self.gamma.mat().as_matrix();
        let tol = COMMUTE_TOL * self.scale();
        commutator_norm(s, u) <= tol && commutator_norm(s, g) <= tol && commutator_norm(u, g) <= tol
    }

    fn require_commuting(&self) -> Result<()> {
        if self.is_commuting() {
            Ok(())
        } else {
            Err(Error::UnsupportedCase("Σ, U₀ and Γ must commute".into()))
        }
    }

    pub fn with_gamma(&self, gamma: FrictionMatrix) -> Result<Self> {
        Self::new(self.sigma.clone(), self.u0.clone(), self.l.clone(), gamma)
    }
}

fn gamma_inverse(g: &FrictionMatrix) -> Result<DMatrix<f64>> {
    Ok(g.mat().map_spectrum(|l| 1.0 / l)?.into_matrix())
}

/// Poisson solution coefficients in the commuting case.
pub fn poisson_coeffs(case: &GaussianCase) -> Result<PoissonCoeffs> {
    case.require_commuting()?;
    let s = case.sigma.as_matrix();
    let u = case.u0.as_matrix();
    let g = case.gamma.mat().as_matrix();
    let gi = gamma_inverse(&case.gamma)?;
    let si = case.sigma.map_spectrum(|l| 1.0 / l)?.into_matrix();
    let l = DVector::from_column_slice(&case.l);
    let g_mat = 0.5 * (s * u * &gi * si) + 0.5 * (g * u * s);
    let e_mat = 0.5 * (u * s);
    let h_mat = 0.5 * (s * u * &gi);
    let h_vec = s * &l;
    let g_vec = g * &h_vec;
    Ok(PoissonCoeffs { g_mat, e_mat, h_mat, g_vec, h_vec })
}

/// `½Tr(ΣU₀Γ⁻¹U₀Σ + ΓU₀Σ²U₀Σ) + 2lᵀΣΓΣl`.
pub fn asymptotic_variance_quadratic(case: &GaussianCase) -> Result<f64> {
    case.require_commuting()?;
    variance_formula(case)
}

fn variance_formula(case: &GaussianCase) -> Result<f64> {
    let s = case.sigma.as_matrix();
    let u = case.u0.as_matrix();
    let g = case.gamma.mat().as_matrix();
    let gi = gamma_inverse(&case.gamma)?;
    let l = DVector::from_column_slice(&case.l);
    let t1 = (s * u * gi * u * s).trace();
    let t2 = (g * u * s * s * u * s).trace();
    let sl = s * l;
    Ok(0.5 * (t1 + t2) + 2.0 * sl.dot(&(g * &sl)))
}

/// The same closed form evaluated at any SPD `Γ` (only equal to the true
/// asymptotic variance when `Γ` commutes with `Σ` and `U₀`). Used for
/// finite differences in directions that leave the commuting set.
pub fn variance_formula_at(case: &GaussianCase, gamma: &FrictionMatrix) -> Result<f64> {
    if !case.sigma_commutes_with_u0() {
        return Err(Error::UnsupportedCase("Σ and U₀ must commute".into()));
    }
    variance_formula(&case.with_gamma(gamma.clone())?)
}

/// `ΔΓ = ∫ ∇_pφ ⊗ ∇_pφ̃ dπ̃ = −EᵀΣE + HHᵀ − hhᵀ`, so that
/// `dσ²·δΓ = −2 ΔΓ:δΓ`.
pub fn delta_gamma_quadratic(case: &GaussianCase) -> Result<SymMatrix> {
    let c = poisson_coeffs(case)?;
    let s = case.sigma.as_matrix();
    let m = -(c.e_mat.transpose() * s * &c.e_mat) + &c.h_mat * c.h_mat.transpose() - &c.h_vec * c.h_vec.transpose();
    SymMatrix::new(m)
}

/// Minimiser of the variance among frictions commuting with `Σ`: `Σ^{-1/2}`
/// when `l = 0`; in 1D with `l ≠ 0`, `(Σ + 4l²U₀⁻²)^{-1/2}`.
pub fn optimal_gamma_commuting(case: &GaussianCase, floor: f64) -> Result<FrictionMatrix> {
    if !case.sigma_commutes_with_u0() {
        return Err(Error::UnsupportedCase("Σ and U₀ must commute".into()));
    }
    let has_l = case.l.iter().any(|&x| x != 0.0);
    if case.dim() == 1 {
        let s = case.sigma.get(0, 0);
        let u = case.u0.get(0, 0);
        if has_l && u == 0.0 {
            return Err(Error::UnsupportedCase("1D optimum with l ≠ 0 needs U₀ ≠ 0".into()));
        }
        let l = case.l[0];
        let shift = if has_l { 4.0 * l * l / (u * u) } else { 0.0 };
        let g = 1.0 / libm::sqrt(s + shift);
        return project_pd(&SymMatrix::from_diagonal(&[g]), floor);
    }
    if has_l {
        return Err(Error::UnsupportedCase("no closed-form optimum for l ≠ 0 in dimension > 1".into()));
    }
    project_pd(&case.sigma.map_spectrum(|l| 1.0 / libm::sqrt(l))?, floor)
}

/// Variance at the optimum: `Tr(U₀²Σ^{5/2})`, or `Σ²U₀²(Σ + 4l²U₀⁻²)^{1/2}` in 1D.
pub fn optimal_variance_commuting(case: &GaussianCase) -> Result<f64> {
    if !case.sigma_commutes_with_u0() {
        return Err(Error::UnsupportedCase("Σ and U₀ must commute".into()));
    }
    let has_l = case.l.iter().any(|&x| x != 0.0);
    if case.dim() == 1 {
        let s = case.sigma.get(0, 0);
        let u = case.u0.get(0, 0);
        let l = case.l[0];
        if has_l && u == 0.0 {
            return Err(Error::UnsupportedCase("1D optimum with l ≠ 0 needs U₀ ≠ 0".into()));
        }
        let shift = if has_l { 4.0 * l * l / (u * u) } else { 0.0 };
        return Ok(s * s * u * u * libm::sqrt(s + shift));
    }
    if has_l {
        return Err(Error::UnsupportedCase("no closed-form optimum for l ≠ 0 in dimension > 1".into()));
    }
    let s52 = case.sigma.map_spectrum(|l| libm::pow(l, 2.5))?;
    let u = case.u0.as_matrix();
    Ok((u * u * s52.as_matrix()).trace())
}

/// `2γ|α|²`, the variance of `f = α·∇U` under scalar friction `γ`.
pub fn linear_observable_variance(alpha: &[f64], gamma: f64) -> f64 {
    2.0 * gamma * alpha.iter().map(|a| a * a).sum::<f64>()
}

/// Quartic variance `12(21γ⁴ + 55γ² + 27) / (γ(3γ² + 4))` for `f = q⁴`
/// under a standard Gaussian.
pub fn quartic_variance(gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Domain(format!("friction must be positive and finite, got {gamma}")));
    }
    let g2 = gamma * gamma;
    Ok(12.0 * (21.0 * g2 * g2 + 55.0 * g2 + 27.0) / (gamma * (3.0 * g2 + 4.0)))
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
pub fn golden_section_min(mut f: impl FnMut(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = (libm::sqrt(5.0) - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Degree-`m` block of `−L` on `span{q^{m−i} p^i}` for `U = v0 q²/2`:
/// row `i` is `−(m−i+1) x_{i−1} + γ i x_i + v0 (i+1) x_{i+1}`.
fn degree_block(m: usize, v0: f64, gamma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(m + 1, m + 1, |i, j| {
        if j + 1 == i {
            -((m - i + 1) as f64)
        } else if j == i {
            gamma * i as f64
        } else if j == i + 1 {
            v0 * (i + 1) as f64
        } else {
            0.0
        }
    })
}

/// The tridiagonal `M_k`: `(M_k)_{i,i+1} = i`, `(M_k)_{i,i} = (i−1)γ`,
/// `(M_k)_{i,i−1} = i−k−2` (1-based).
pub fn mk_matrix(k: usize, gamma: f64) -> DMatrix<f64> {
    degree_block(k, 1.0, gamma)
}

/// Solves `M_k (a_{k,0}, …, a_{0,k})ᵀ = (1, 0, …, 0)ᵀ`.
pub fn solve_mk(k: usize, gamma: f64) -> Result<Vec<f64>> {
    if k % 2 == 0 {
        return Err(Error::Domain(format!("M_k is defined for odd k, got {k}")));
    }
    if !(gamma > 0.0) {
        return Err(Error::Domain(format!("friction must be positive, got {gamma}")));
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[0] = 1.0;
    let x = mk_matrix(k, gamma)
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numeric(format!("M_{k} is singular at γ = {gamma}")))?;
    Ok(x.iter().copied().collect())
}

/// Polynomial Poisson solution `φ(q, p) = Σ a[i][j] q^i p^j` for
/// `U = v0 q²/2`, unit mass, scalar friction `γ` and `f = Σ_k c_k q^k`,
/// normalised so `E_π̃[φ] = 0`.
#[derive(Debug, Clone)]
pub struct PolyPoisson1d {
    pub coeffs: Vec<Vec<f64>>,
    pub v0: f64,
    pub gamma: f64,
    f: Vec<f64>,
}

/// `E[q^k]` for `q ~ N(0, s)`.
pub fn gaussian_moment(k: usize, s: f64) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    let mut m = 1.0;
    let mut j = 1;
    while j < k {
        m *= j as f64 * s;
        j += 2;
    }
    m
}

pub fn solve_polynomial_poisson_1d(f: &[f64], v0: f64, gamma: f64) -> Result<PolyPoisson1d> {
    if !(gamma > 0.0) || !(v0 > 0.0) {
        return Err(Error::Domain(format!("need γ > 0 and V0 > 0, got {gamma}, {v0}")));
    }
    let d = f.len().saturating_sub(1);
    let mut a = vec![vec![0.0; d + 3]; d + 3];
    let s = 1.0 / v0;
    let mean_f: f64 = f.iter().enumerate().map(|(k, c)| c * gaussian_moment(k, s)).sum();
    for m in (1..=d).rev() {
        let mut rhs = DVector::zeros(m + 1);
        rhs[0] = f[m];
        for i in 0..=m {
            // −L's ∂_p² part lowers degree by two.
            rhs[i] += gamma * ((i + 2) * (i + 1)) as f64 * a[m - i][i + 2];
        }
        let x = degree_block(m, v0, gamma)
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numeric(format!("degree-{m} block singular at γ = {gamma}")))?;
        for i in 0..=m {
            a[m - i][i] = x[i];
        }
    }
    let residual = f.first().copied().unwrap_or(0.0) - mean_f + 2.0 * gamma * a[0][2];
    let scale = 1.0 + mean_f.abs() + f.iter().map(|c| c.abs()).sum::<f64>();
    if residual.abs() > 1e-8 * scale {
        return Err(Error::Numeric(format!("degree-0 consistency residual {residual}")));
    }
    let mut mean_phi = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, c) in row.iter().enumerate() {
            mean_phi += c * gaussian_moment(i, s) * gaussian_moment(j, 1.0);
        }
    }
    a[0][0] -= mean_phi;
    Ok(PolyPoisson1d { coeffs: a, v0, gamma, f: f.to_vec() })
}

impl PolyPoisson1d {
    /// `2 E_π̃[φ (f − π(f))]`.
    pub fn variance(&self) -> f64 {
        let s = 1.0 / self.v0;
        let mut total = 0.0;
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if *c == 0.0 {
                    continue;
                }
                let pm = gaussian_moment(j, 1.0);
                for (k, fk) in self.f.iter().enumerate() {
                    // the centring constant of f drops out because E[φ] = 0
                    total += c * fk * gaussian_moment(i + k, s) * pm;
                }
            }
        }
        2.0 * total
    }

    pub fn coeff(&self, i: usize, j: usize) -> f64 {
        self.coeffs.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0)
    }
}

/// Variance of `f = Σ c_k q^k` under `U = v0 q²/2` and friction `γ`.
pub fn polynomial_variance_1d(f: &[f64], v0: f64, gamma: f64) -> Result<f64> {
    Ok(solve_polynomial_poisson_1d(f, v0, gamma)?.variance())
}

#[cfg(test)]
mod tests {
    use super::poly::Poly;
    use super::*;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn case1d(s: f64, u: f64, l: f64, g: f64) -> GaussianCase {
        GaussianCase::new(
            SymMatrix::from_diagonal(&[s]),
            SymMatrix::from_diagonal(&[u]),
            vec![l],
            FrictionMatrix::scalar(1, g, 1e-3).unwrap(),
        )
        .unwrap()
    }

    /// Random commuting `(Σ, U₀, Γ)` built in a shared orthogonal basis.
    fn random_case(n: usize, seed: u64, gamma_opt: bool) -> GaussianCase {
        let mut r = RngStream::new(seed, 0);
        let a = DMatrix::from_fn(n, n, |_, _| r.normal());
        let q = a.qr().q();
        let diag = |r: &mut RngStream, lo: f64, hi: f64| -> DMatrix<f64> {
            DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| lo + (hi - lo) * r.uniform()))
        };
        let s = &q * diag(&mut r, 0.2, 3.0) * q.transpose();
        let u = &q * diag(&mut r, 0.1, 2.0) * q.transpose();
        let g = &q * diag(&mut r, 0.3, 3.0) * q.transpose();
        let sigma = SymMatrix::new(s).unwrap();
        let gamma = if gamma_opt {
            sigma.map_spectrum(|l| 1.0 / libm::sqrt(l)).unwrap()
        } else {
            SymMatrix::new(g).unwrap()
        };
        GaussianCase::new(sigma, SymMatrix::new(u).unwrap(), vec![0.0; n], FrictionMatrix::new(gamma, 1e-3).unwrap())
            .unwrap()
    }

    #[test]
    fn coefficient_examples() {
        let c = poisson_coeffs(&case1d(1.0, 1.0, 0.0, 1.0)).unwrap();
        assert_relative_eq!(c.g_mat[(0, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.e_mat[(0, 0)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(c.h_mat[(0, 0)], 0.5, epsilon = 1e-15);
        let c = poisson_coeffs(&case1d(0.5, 1.0, 2.0, 3.0)).unwrap();
        assert_relative_eq!(c.h_vec[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(c.g_vec[0], 3.0, epsilon = 1e-15);
    }

    #[test]
    fn non_commuting_is_rejected() {
        let case = GaussianCase::new(
            SymMatrix::from_diagonal(&[1.0, 2.0]),
            SymMatrix::from_row_slice(2, &[1.0, 0.5, 0.5, 1.0]).unwrap(),
            vec![0.0, 0.0],
            FrictionMatrix::scalar(2, 1.0, 0.1).unwrap(),
        )
        .unwrap();
        assert!(matches!(poisson_coeffs(&case), Err(Error::UnsupportedCase(_))));
        assert!(matches!(asymptotic_variance_quadratic(&case), Err(Error::UnsupportedCase(_))));
    }

    #[test]
    fn one_dimensional_variance_curve() {
        // σ²(Γ) = (1/(2V0²)) (Γ⁻¹ + Γ/V0)
        for &(v0, g) in &[(1.0, 1.0), (5.0, 2.0), (5.0, 0.7), (0.3, 1.5)] {
            let v = asymptotic_variance_quadratic(&case1d(1.0 / v0, 1.0, 0.0, g)).unwrap();
            assert_relative_eq!(v, (1.0 / (2.0 * v0 * v0)) * (1.0 / g + g / v0), max_relative = 1e-13);
        }
        let v = asymptotic_variance_quadratic(&case1d(0.2, 1.0, 0.0, libm::sqrt(5.0))).unwrap();
        assert_relative_eq!(v, libm::pow(5.0, -2.5), max_relative = 1e-13);
        assert_relative_eq!(v, 0.017888543819998316, max_relative = 1e-13);
    }

    #[test]
    fn optimum_examples() {
        let c = case1d(1.0, 1.0, 1.0, 1.0);
        assert_relative_eq!(optimal_variance_commuting(&c).unwrap(), libm::sqrt(5.0), max_relative = 1e-14);
        let g = optimal_gamma_commuting(&c, 1e-3).unwrap();
        assert_relative_eq!(g.mat().get(0, 0), 1.0 / libm::sqrt(5.0), max_relative = 1e-14);
        let at = asymptotic_variance_quadratic(&c.with_gamma(g).unwrap()).unwrap();
        assert_relative_eq!(at, libm::sqrt(5.0), max_relative = 1e-13);

        let c = case1d(1.0, 2.0, 1.0, 1.0);
        let g = optimal_gamma_commuting(&c, 1e-3).unwrap();
        assert_relative_eq!(g.mat().get(0, 0), 1.0 / libm::sqrt(2.0), max_relative = 1e-14);

        let g = optimal_gamma_commuting(&case1d(1.0, 1.0, 0.0, 3.0), 1e-3).unwrap();
        assert_relative_eq!(g.mat().get(0, 0), 1.0, max_relative = 1e-14);

        let d = GaussianCase::new(
            SymMatrix::from_diagonal(&[0.2, 1.0]),
            SymMatrix::identity(2),
            vec![0.0, 0.0],
            FrictionMatrix::scalar(2, 1.0, 0.1).unwrap(),
        )
        .unwrap();
        let g = optimal_gamma_commuting(&d, 1e-3).unwrap();
        assert_relative_eq!(g.mat().get(0, 0), libm::sqrt(5.0), max_relative = 1e-13);
        assert_relative_eq!(g.mat().get(1, 1), 1.0, max_relative = 1e-13);
        assert_relative_eq!(g.mat().get(0, 1), 0.0, epsilon = 1e-13);

        let mut with_l = d.clone();
        with_l.l = vec![1.0, 0.0];
        assert!(matches!(optimal_gamma_commuting(&with_l, 1e-3), Err(Error::UnsupportedCase(_))));
    }

    #[test]
    fn linear_variance_examples() {
        assert_eq!(linear_observable_variance(&[1.0, 1.0], 0.0), 0.0);
        assert_relative_eq!(linear_observable_variance(&[1.0, 1.0], 0.5), 2.0);
        // f = l·q under N(0, Σ): α = Σl and the quadratic formula with U₀ = 0
        let c = case1d(0.5, 0.0, 3.0, 1.7);
        let v = asymptotic_variance_quadratic(&c).unwrap();
        assert_relative_eq!(v, linear_observable_variance(&[0.5 * 3.0], 1.7), max_relative = 1e-14);
    }

    #[test]
    fn quartic_examples() {
        assert_relative_eq!(quartic_variance(1.0).unwrap(), 12.0 * 103.0 / 7.0, max_relative = 1e-15);
        assert_relative_eq!(quartic_variance(1.0).unwrap(), 176.57142857142858, max_relative = 1e-12);
        assert!(quartic_variance(0.0).is_err());
        assert!(quartic_variance(1e-6).unwrap() > 1e7);
        assert!(quartic_variance(1e6).unwrap() > 1e7);
        let g = golden_section_min(|g| quartic_variance(g).unwrap(), 0.1, 10.0, 1e-10);
        assert!((g - 0.97024).abs() < 1e-4, "minimiser {g}");
        let v = quartic_variance(g).unwrap();
        assert!(v > 0.0 && v <= quartic_variance(1.0).unwrap());
        for &h in &[0.5, 2.0, 4.0] {
            assert!(quartic_variance(h).unwrap() > v);
        }
    }

    #[test]
    fn quartic_closed_form_matches_cascade() {
        for &g in &[0.3, 0.5, 1.0, 2.0, 3.5] {
            let v = polynomial_variance_1d(&[0.0, 0.0, 0.0, 0.0, 1.0], 1.0, g).unwrap();
            assert_relative_eq!(v, quartic_variance(g).unwrap(), max_relative = 1e-11);
        }
    }

    #[test]
    fn quadratic_cascade_matches_closed_form() {
        for &(v0, g) in &[(1.0, 1.0), (5.0, 2.2), (2.0, 0.4)] {
            let v = polynomial_variance_1d(&[0.0, 0.0, 0.5], v0, g).unwrap();
            let c = asymptotic_variance_quadratic(&case1d(1.0 / v0, 1.0, 0.0, g)).unwrap();
            assert_relative_eq!(v, c, max_relative = 1e-12);
        }
    }

    #[test]
    fn mk_examples() {
        let x = solve_mk(1, 0.7).unwrap();
        assert_relative_eq!(x[0], 0.7, max_relative = 1e-15);
        assert_relative_eq!(x[1], 1.0, max_relative = 1e-15);
        let m = mk_matrix(1, 0.7);
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.7]));
        assert!(solve_mk(2, 1.0).is_err());
        assert!(solve_mk(3, 0.0).is_err());
        // the top block of the cascade is M_k
        let sol = solve_polynomial_poisson_1d(&[0.0, 0.0, 0.0, 1.0], 1.0, 1.3).unwrap();
        let top = solve_mk(3, 1.3).unwrap();
        for (i, t) in top.iter().enumerate() {
            assert_relative_eq!(sol.coeff(3 - i, i), *t, max_relative = 1e-13);
        }
    }

    #[test]
    fn cubic_generator_residual_vanishes() {
        for &g in &[1.0, 0.4, 2.5] {
            let sol = solve_polynomial_poisson_1d(&[0.0, 0.0, 0.0, 1.0], 1.0, g).unwrap();
            let phi = Poly::from_table_1d(&sol.coeffs);
            let lphi = phi.generator_gaussian(&DMatrix::identity(1, 1), &DMatrix::from_element(1, 1, g));
            let target = Poly::from_table_1d(&[vec![0.0], vec![0.0], vec![0.0], vec![1.0]]);
            let resid = lphi.scale(-1.0).sub(&target);
            assert!(resid.max_abs_coeff() < 1e-10, "residual {}", resid.max_abs_coeff());
        }
    }

    #[test]
    fn odd_variance_vanishes_linearly() {
        let gs = [0.1, 0.05, 0.025];
        let vs: Vec<f64> = gs.iter().map(|&g| polynomial_variance_1d(&[0.0, 1.0, 0.0, 2.0], 1.0, g).unwrap()).collect();
        let s1 = (vs[0] - vs[1]) / (gs[0] - gs[1]);
        let s2 = (vs[1] - vs[2]) / (gs[1] - gs[2]);
        assert!((s1 / s2 - 1.0).abs() < 0.05, "slopes {s1} {s2}");
        assert!(vs[2] < vs[1] && vs[1] < vs[0]);
        assert!(vs[2] / gs[2] < 2.0 * s2);
    }

    #[test]
    fn odd_parity_of_coefficients() {
        let sol = solve_polynomial_poisson_1d(&[0.0, 0.5, 0.0, 1.0, 0.0, 0.3], 1.0, 0.8).unwrap();
        for (i, row) in sol.coeffs.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                if (i + j) % 2 == 0 {
                    assert_eq!(*c, 0.0, "a[{i}][{j}]");
                }
            }
        }
    }

    #[test]
    fn quadratic_ansatz_satisfies_poisson_equation() {
        for seed in 0..4 {
            let n = 1 + seed as usize % 3;
            let mut case = random_case(n, seed, false);
            let mut r = RngStream::new(seed + 100, 1);
            case.l = (0..n).map(|_| r.normal()).collect();
            let c = poisson_coeffs(&case).unwrap();
            let phi = Poly::quadratic_ansatz(&c, case.sigma.as_matrix());
            let prec = case.sigma.map_spectrum(|l| 1.0 / l).unwrap().into_matrix();
            let lphi = phi.generator_gaussian(&prec, case.gamma.mat().as_matrix());
            let f = Poly::quadratic_observable(case.u0.as_matrix(), &case.l, case.sigma.as_matrix());
            let resid = lphi.scale(-1.0).sub(&f);
            assert!(resid.max_abs_coeff() < 1e-10, "residual {}", resid.max_abs_coeff());
            // 2 E[φ (f − πf)] reproduces the closed form
            let cov = poly::block_covariance(case.sigma.as_matrix());
            let v = 2.0 * phi.mul(&f).gaussian_expectation(&cov);
            assert_relative_eq!(v, asymptotic_variance_quadratic(&case).unwrap(), max_relative = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn minimum_value_at_inverse_sqrt(n in 1usize..6, seed in 0u64..10_000) {
            let case = random_case(n, seed, true);
            let v = asymptotic_variance_quadratic(&case).unwrap();
            let want = optimal_variance_commuting(&case).unwrap();
            prop_assert!((v - want).abs() <= 1e-10 * want, "{} vs {}", v, want);
        }

        #[test]
        fn directional_derivative_is_minus_two_delta(n in 1usize..5, seed in 0u64..10_000) {
            let case = random_case(n, seed, false);
            let dg = delta_gamma_quadratic(&case).unwrap();
            let mut r = RngStream::new(seed, 7);
            let dir = SymMatrix::new(DMatrix::from_fn(n, n, |_, _| r.normal())).unwrap();
            let eps = 1e-5;
            let plus = FrictionMatrix::new(case.gamma.mat().add(&dir.scale(eps)), 1e-6).unwrap();
            let minus = FrictionMatrix::new(case.gamma.mat().add(&dir.scale(-eps)), 1e-6).unwrap();
            let fd = (variance_formula_at(&case, &plus).unwrap() - variance_formula_at(&case, &minus).unwrap()) / (2.0 * eps);
            let an = -2.0 * dg.as_matrix().component_mul(dir.as_matrix()).sum();
            prop_assert!((fd - an).abs() <= 1e-6 * (an.abs().max(1e-3)), "{} vs {}", fd, an);
        }

        #[test]
        fn optimum_is_stationary(n in 1usize..5, seed in 0u64..10_000) {
            let case = random_case(n, seed, true);
            let dg = delta_gamma_quadratic(&case).unwrap();
            prop_assert!(dg.max_abs() <= 1e-8 * (1.0 + case.sigma.max_abs().powi(3)));
        }
    }
}
