//! One-step maps: BAOAB for underdamped Langevin, the matching tangent
//! (first-variation) scheme, and two overdamped baselines.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVectorView, DVectorViewMut};

use crate::error::{Error, Result};
use crate::linalg::{spd_matrix_function, FrictionMatrix};
use crate::rng::RngStream;
use crate::targets::Target;

/// Any state or tangent entry above this magnitude aborts the run.
pub const DIVERGENCE_BOUND: f64 = 1e8;

fn guard(what: &str, step: u64, v: &[f64]) -> Result<()> {
    for (i, x) in v.iter().enumerate() {
        if !x.is_finite() || x.abs() > DIVERGENCE_BOUND {
            return Err(Error::Divergence { step, detail: format!("{what}[{i}] = {x}") });
        }
    }
    Ok(())
}

/// `exp(-ΔtΓ)` and `sqrt(I - exp(-2ΔtΓ))` for one `(Γ, Δt)` pair.
#[derive(Debug, Clone)]
pub struct OuFactors {
    decay: DMatrix<f64>,
    noise: DMatrix<f64>,
    dt: f64,
    version: u64,
}

impl OuFactors {
    pub fn new(gamma: &FrictionMatrix, dt: f64, version: u64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let decay = spd_matrix_function(gamma, |l| libm::exp(-dt * l))?.into_matrix();
        let noise = spd_matrix_function(gamma, |l| libm::sqrt(1.0 - libm::exp(-2.0 * dt * l)))?.into_matrix();
        Ok(Self { decay, noise, dt, version })
    }

    /// Undamped, noise-free factors (`Γ = 0`): the step becomes velocity Verlet.
    pub fn hamiltonian(n: usize, dt: f64) -> Self {
        Self { decay: DMatrix::identity(n, n), noise: DMatrix::zeros(n, n), dt, version: 0 }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Version tag of the friction these factors were built from.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn decay(&self) -> &DMatrix<f64> {
        &self.decay
    }

    pub fn dim(&self) -> usize {
        self.decay.nrows()
    }
}

/// Gradient oracle for the position kicks: exact, or a fresh minibatch per
/// evaluation drawn from its own stream.
#[derive(Debug, Clone)]
pub struct ForceSource {
    batch_rng: Option<RngStream>,
}

impl ForceSource {
    pub fn exact() -> Self {
        Self { batch_rng: None }
    }

    pub fn minibatch(rng: RngStream) -> Self {
        Self { batch_rng: Some(rng) }
    }

    pub fn is_minibatch(&self) -> bool {
        self.batch_rng.is_some()
    }

    pub fn eval(&mut self, target: &dyn Target, q: &[f64], out: &mut [f64]) -> Result<()> {
        match &mut self.batch_rng {
            None => {
                target.gradient_into(q, out);
                Ok(())
            }
            Some(rng) => target.minibatch_gradient_into(q, rng, out),
        }
    }
}

/// Position, momentum and the cached force `∇U(q)` (mass `I`).
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    force: Vec<f64>,
    scratch: Vec<f64>,
    step: u64,
}

impl PhaseState {
    pub fn new(target: &dyn Target, forces: &mut ForceSource, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let n = target.dim();
        if q.len() != n || p.len() != n {
            return Err(Error::Dimension(format!("state of length {}/{} for dimension {n}", q.len(), p.len())));
        }
        let mut force = vec![0.0; n];
        forces.eval(target, &q, &mut force)?;
        guard("force", 0, &force)?;
        Ok(Self { q, p, force, scratch: vec![0.0; n], step: 0 })
    }

    pub fn zeros(target: &dyn Target, forces: &mut ForceSource) -> Result<Self> {
        let n = target.dim();
        Self::new(target, forces, vec![0.0; n], vec![0.0; n])
    }

    /// `(q, −p)` sharing the cached force.
    pub fn flipped(&self) -> Self {
        let mut s = self.clone();
        s.p.iter_mut().for_each(|x| *x = -*x);
        s
    }

    /// Overwrites this state with `(other.q, sign·other.p)`.
    pub fn copy_from(&mut self, other: &PhaseState, sign: f64) {
        self.q.copy_from_slice(&other.q);
        for (a, b) in self.p.iter_mut().zip(&other.p) {
            *a = sign * b;
        }
        self.force.copy_from_slice(&other.force);
    }

    pub fn force(&self) -> &[f64] {
        &self.force
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// One BAOAB step. `ξ ~ N(0, I)` comes from `rng`.
pub fn baoab_step(
    s: &mut PhaseState,
    target: &dyn Target,
    forces: &mut ForceSource,
    ou: &OuFactors,
    rng: &mut RngStream,
) -> Result<()> {
    let h = 0.5 * ou.dt;
    let n = s.q.len();
    for i in 0..n {
        s.p[i] -= h * s.force[i];
        s.q[i] += h * s.p[i];
    }
    // O: p ← e^{-ΔtΓ} p + sqrt(I − e^{-2ΔtΓ}) ξ
    rng.fill_normal(&mut s.scratch);
    {
        let xi = DVectorView::from_slice(&s.scratch, n);
        let mut tmp = vec![0.0; n];
        let mut t = DVectorViewMut::from_slice(&mut tmp, n);
        t.gemv(1.0, &ou.noise, &xi, 0.0);
        let pv = DVectorView::from_slice(&s.p, n);
        t.gemv(1.0, &ou.decay, &pv, 1.0);
        s.p.copy_from_slice(&tmp);
    }
    for i in 0..n {
        s.q[i] += h * s.p[i];
    }
    forces.eval(target, &s.q, &mut s.force)?;
    for i in 0..n {
        s.p[i] -= h * s.force[i];
    }
    s.step += 1;
    guard("q", s.step, &s.q)?;
    guard("p", s.step, &s.p)
}

/// Which position tangent enters the closing kick of the tangent scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClosingKick {
    /// `D²U(q^{i+1}) Dq^{i+1}`: the exact derivative of the BAOAB map.
    Updated,
    /// `D²U(q^{i+1}) Dq^{i}`.
    Lagged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TangentOptions {
    /// Replace Hessian products by gradient differences.
    pub hessian_free: bool,
    pub closing: ClosingKick,
}

impl Default for TangentOptions {
    fn default() -> Self {
        Self { hessian_free: false, closing: ClosingKick::Updated }
    }
}

/// `(D_p q, D_p p)`, each `n × n`, started at `(0, I)`.
#[derive(Debug, Clone)]
pub struct TangentState {
    pub dq: DMatrix<f64>,
    pub dp: DMatrix<f64>,
    step: u64,
}

impl TangentState {
    pub fn new(n: usize) -> Self {
        Self { dq: DMatrix::zeros(n, n), dp: DMatrix::identity(n, n), step: 0 }
    }

    pub fn reset(&mut self) {
        self.dq.fill(0.0);
        self.dp.fill_with_identity();
    }

    pub fn max_abs(&self) -> f64 {
        self.dq.amax().max(self.dp.amax())
    }
}

/// Single-direction tangent `(D_p q v, D_p p v)`.
#[derive(Debug, Clone)]
pub struct DirTangentState {
    pub dqv: Vec<f64>,
    pub dpv: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl DirTangentState {
    /// Starts at `(0, v)`; `v` must be a unit vector.
    pub fn new(v: Vec<f64>) -> Result<Self> {
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("direction must have unit length, got {norm}")));
        }
        Ok(Self { dqv: vec![0.0; v.len()], dpv: v.clone(), v, step: 0 })
    }

    /// A uniformly random unit direction.
    pub fn random(n: usize, rng: &mut RngStream) -> Self {
        let mut v = vec![0.0; n];
        loop {
            rng.fill_normal(&mut v);
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            if norm > 1e-12 {
                v.iter_mut().for_each(|x| *x /= norm);
                break;
            }
        }
        Self { dqv: vec![0.0; n], dpv: v.clone(), v, step: 0 }
    }

    pub fn direction(&self) -> &[f64] {
        &self.v
    }
}

struct KickCtx<'a> {
    target: &'a dyn Target,
    q: &'a [f64],
    /// `∇U(q)`, only needed for the Hessian-free difference.
    grad: Option<&'a [f64]>,
}

impl KickCtx<'_> {
    /// `dp −= (Δt/2) D²U(q) dq`.
    fn kick(&self, h: f64, dq: &[f64], dp: &mut [f64], work: &mut [f64], shifted: &mut [f64]) -> Result<()> {
        match self.grad {
            None => {
                self.target.hessian_vec_into(self.q, dq, work)?;
                for (a, b) in dp.iter_mut().zip(work.iter()) {
                    *a -= h * b;
                }
            }
            Some(g) => {
                // −∇U(q + (Δt/2)dq) + ∇U(q)
                for ((s, &x), &d) in shifted.iter_mut().zip(self.q).zip(dq) {
                    *s = x + h * d;
                }
                self.target.gradient_into(shifted, work);
                for ((a, &w), &g0) in dp.iter_mut().zip(work.iter()).zip(g) {
                    *a += g0 - w;
                }
            }
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn column_step(
    dq: &mut [f64],
    dp: &mut [f64],
    before: &KickCtx<'_>,
    after: &KickCtx<'_>,
    ou: &OuFactors,
    closing: ClosingKick,
    work: &mut [f64],
    shifted: &mut [f64],
    lagged: &mut [f64],
) -> Result<()> {
    let n = dq.len();
    let h = 0.5 * ou.dt;
    before.kick(h, dq, dp, work, shifted)?;
    if closing == ClosingKick::Lagged {
        lagged.copy_from_slice(dq);
    }
    for i in 0..n {
        dq[i] += h * dp[i];
    }
    {
        let pv = DVectorView::from_slice(dp, n);
        let mut w = DVectorViewMut::from_slice(work, n);
        w.gemv(1.0, &ou.decay, &pv, 0.0);
    }
    dp.copy_from_slice(work);
    for i in 0..n {
        dq[i] += h * dp[i];
    }
    match closing {
        ClosingKick::Updated => after.kick(h, dq, dp, work, shifted),
        ClosingKick::Lagged => after.kick(h, lagged, dp, work, shifted),
    }
}

struct StepBuffers {
    work: Vec<f64>,
    shifted: Vec<f64>,
    lagged: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
}

impl StepBuffers {
    fn new(n: usize) -> Self {
        Self { work: vec![0.0; n], shifted: vec![0.0; n], lagged: vec![0.0; n], g0: vec![0.0; n], g1: vec![0.0; n] }
    }
}

fn check_tangent_inputs(target: &dyn Target, q0: &[f64], q1: &[f64], opts: &TangentOptions) -> Result<()> {
    let n = target.dim();
    if q0.len() != n || q1.len() != n {
        return Err(Error::Dimension(format!("tangent path of length {}/{} for dimension {n}", q0.len(), q1.len())));
    }
    if !opts.hessian_free && !target.has_hessian() {
        return Err(Error::Unsupported("hessian_vec"));
    }
    Ok(())
}

/// Advances every column of the tangent along the step `q0 → q1`.
pub fn tangent_baoab_step(
    ts: &mut TangentState,
    q0: &[f64],
    q1: &[f64],
    target: &dyn Target,
    ou: &OuFactors,
    opts: &TangentOptions,
) -> Result<()> {
    check_tangent_inputs(target, q0, q1, opts)?;
    let n = q0.len();
    let mut b = StepBuffers::new(n);
    if opts.hessian_free {
        target.gradient_into(q0, &mut b.g0);
        target.gradient_into(q1, &mut b.g1);
    }
    let before = KickCtx { target, q: q0, grad: opts.hessian_free.then_some(&b.g0[..]) };
    let after = KickCtx { target, q: q1, grad: opts.hessian_free.then_some(&b.g1[..]) };
    let mut dqc = vec![0.0; n];
    let mut dpc = vec![0.0; n];
    for k in 0..ts.dq.ncols() {
        dqc.copy_from_slice(ts.dq.column(k).as_slice());
        dpc.copy_from_slice(ts.dp.column(k).as_slice());
        column_step(&mut dqc, &mut dpc, &before, &after, ou, opts.closing, &mut b.work, &mut b.shifted, &mut b.lagged)?;
        ts.dq.column_mut(k).copy_from_slice(&dqc);
        ts.dp.column_mut(k).copy_from_slice(&dpc);
    }
    ts.step += 1;
    guard("Dq", ts.step, ts.dq.as_slice())?;
    guard("Dp", ts.step, ts.dp.as_slice())
}

/// The tangent scheme multiplied on the right by a fixed direction.
pub fn dir_tangent_step(
    ds: &mut DirTangentState,
    q0: &[f64],
    q1: &[f64],
    target: &dyn Target,
    ou: &OuFactors,
    opts: &TangentOptions,
) -> Result<()> {
    check_tangent_inputs(target, q0, q1, opts)?;
    let mut b = StepBuffers::new(q0.len());
    if opts.hessian_free {
        target.gradient_into(q0, &mut b.g0);
        target.gradient_into(q1, &mut b.g1);
    }
    let before = KickCtx { target, q: q0, grad: opts.hessian_free.then_some(&b.g0[..]) };
    let after = KickCtx { target, q: q1, grad: opts.hessian_free.then_some(&b.g1[..]) };
    column_step(&mut ds.dqv, &mut ds.dpv, &before, &after, ou, opts.closing, &mut b.work, &mut b.shifted, &mut b.lagged)?;
    ds.step += 1;
    guard("Dqv", ds.step, &ds.dqv)?;
    guard("Dpv", ds.step, &ds.dpv)
}

/// Euler–Maruyama for `dq = −∇U dt + √2 dW`.
pub fn overdamped_step(
    q: &mut [f64],
    target: &dyn Target,
    forces: &mut ForceSource,
    dt: f64,
    rng: &mut RngStream,
    step: u64,
) -> Result<()> {
    let n = q.len();
    let mut g = vec![0.0; n];
    forces.eval(target, q, &mut g)?;
    let s = libm::sqrt(2.0 * dt);
    for (x, gi) in q.iter_mut().zip(&g) {
        *x += -gi * dt + s * rng.normal();
    }
    guard("q", step, q)
}

/// Antisymmetric drift perturbation `J`.
#[derive(Debug, Clone)]
pub struct Antisymmetric(DMatrix<f64>);

impl Antisymmetric {
    pub fn new(j: DMatrix<f64>) -> Result<Self> {
        if j.nrows() != j.ncols() {
            return Err(Error::Dimension(format!("J must be square, got {}x{}", j.nrows(), j.ncols())));
        }
        if (&j + j.transpose()).amax() > 0.0 {
            return Err(Error::Config("J is not antisymmetric".into()));
        }
        Ok(Self(j))
    }

    /// `J_{ij} = 1` if `j − i ∈ {1, 1 − n}`, `−1` for the transposed
    /// positions. For `n = 2` the two rules collide; the single rotation
    /// `[[0, 1], [−1, 0]]` is used.
    pub fn cyclic(n: usize) -> Self {
        let mut j = DMatrix::zeros(n, n);
        if n == 2 {
            j[(0, 1)] = 1.0;
            j[(1, 0)] = -1.0;
        } else if n > 2 {
            for i in 0..n {
                let k = (i + 1) % n;
                j[(i, k)] = 1.0;
                j[(k, i)] = -1.0;
            }
        }
        Self(j)
    }

    pub fn zeros(n: usize) -> Self {
        Self(DMatrix::zeros(n, n))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Euler–Maruyama for `dq = −(I + J)∇U dt + √2 dW`.
pub fn irreversible_overdamped_step(
    q: &mut [f64],
    target: &dyn Target,
    forces: &mut ForceSource,
    j: &Antisymmetric,
    dt: f64,
    rng: &mut RngStream,
    step: u64,
) -> Result<()> {
    let n = q.len();
    if j.0.nrows() != n {
        return Err(Error::Dimension(format!("J is {}x{0}, state has dimension {n}", j.0.nrows())));
    }
    let mut g = vec![0.0; n];
    forces.eval(target, q, &mut g)?;
    let mut drift = g.clone();
    {
        let gv = DVectorView::from_slice(&g, n);
        let mut d = DVectorViewMut::from_slice(&mut drift, n);
        d.gemv(1.0, &j.0, &gv, 1.0);
    }
    let s = libm::sqrt(2.0 * dt);
    for (x, di) in q.iter_mut().zip(&drift) {
        *x += -di * dt + s * rng.normal();
    }
    guard("q", step, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::SymMatrix;
    use crate::targets::{DoubleWellTarget, GaussianTarget};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    struct Flat(usize);
    impl Target for Flat {
        fn dim(&self) -> usize {
            self.0
        }
        fn potential(&self, _: &[f64]) -> Option<f64> {
            Some(0.0)
        }
        fn gradient_into(&self, _: &[f64], out: &mut [f64]) {
            out.fill(0.0);
        }
    }

    fn gauss1(v0: f64) -> GaussianTarget {
        GaussianTarget::isotropic(1, v0).unwrap()
    }

    fn ou(n: usize, g: f64, dt: f64) -> OuFactors {
        OuFactors::new(&FrictionMatrix::scalar(n, g, 0.01).unwrap(), dt, 0).unwrap()
    }

    /// Long-run `(E[q²], E[p²])` under BAOAB on `U = v0 q²/2`.
    fn second_moments(v0: f64, gamma: f64, dt: f64, steps: usize, seed: u64) -> (f64, f64) {
        let t = gauss1(v0);
        let mut fs = ForceSource::exact();
        let mut s = PhaseState::zeros(&t, &mut fs).unwrap();
        let o = ou(1, gamma, dt);
        let mut rng = RngStream::new(seed, 0);
        let (mut aq, mut ap) = (0.0, 0.0);
        for i in 0..steps {
            baoab_step(&mut s, &t, &mut fs, &o, &mut rng).unwrap();
            if i >= 1000 {
                aq += s.q[0] * s.q[0];
                ap += s.p[0] * s.p[0];
            }
        }
        let m = (steps - 1000) as f64;
        (aq / m, ap / m)
    }

    #[test]
    fn full_refresh_gives_standard_normal_momenta() {
        let t = Flat(1);
        let mut fs = ForceSource::exact();
        let mut s = PhaseState::zeros(&t, &mut fs).unwrap();
        let o = OuFactors::new(&FrictionMatrix::scalar(1, 1e6, 1.0).unwrap(), 0.1, 0).unwrap();
        let mut rng = RngStream::new(4, 0);
        let mut ps: Vec<f64> = (0..10_000)
            .map(|_| {
                baoab_step(&mut s, &t, &mut fs, &o, &mut rng).unwrap();
                s.p[0]
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        // Kolmogorov–Smirnov against N(0,1); 1.63/√N is the 1% critical value.
        let n = ps.len() as f64;
        let d = ps
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let c = 0.5 * libm::erfc(-x / core::f64::consts::SQRT_2);
                (c - i as f64 / n).abs().max((c - (i + 1) as f64 / n).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / libm::sqrt(n), "KS statistic {d}");
    }

    #[test]
    fn hamiltonian_limit_energy_drift_is_second_order() {
        let drift = |dt: f64| {
            let t = gauss1(1.0);
            let mut fs = ForceSource::exact();
            let mut s = PhaseState::new(&t, &mut fs, vec![1.0], vec![0.0]).unwrap();
            let o = OuFactors::hamiltonian(1, dt);
            let mut rng = RngStream::new(0, 0);
            let e0 = 0.5;
            let mut worst: f64 = 0.0;
            for _ in 0..1000 {
                baoab_step(&mut s, &t, &mut fs, &o, &mut rng).unwrap();
                let e = 0.5 * (s.q[0] * s.q[0] + s.p[0] * s.p[0]);
                worst = worst.max((e - e0).abs());
            }
            worst
        };
        let (a, b) = (drift(0.1), drift(0.05));
        let slope = libm::log2(a / b);
        assert!((slope - 2.0).abs() < 0.3, "drift slope {slope}");
    }

    #[test]
    fn stationary_variance_of_gaussian() {
        let (v, _) = second_moments(5.0, libm::sqrt(5.0), 0.08, 400_000, 1);
        assert!((v - 0.2).abs() < 0.03 * 0.2, "variance {v}");
    }

    #[test]
    fn weak_error_is_second_order() {
        // On a harmonic well BAOAB samples q without bias, so the step-size
        // dependence shows up in the momentum marginal only.
        let (q_big, p_big) = second_moments(1.0, 1.0, 0.4, 2_000_000, 9);
        let (_, p_small) = second_moments(1.0, 1.0, 0.2, 2_000_000, 9);
        assert!((q_big - 1.0).abs() < 0.02, "q bias {q_big}");
        let ratio = (p_big - 1.0) / (p_small - 1.0);
        assert!(ratio > 2.0 && ratio < 8.0, "bias ratio {ratio} ({p_big}, {p_small})");
    }

    #[test]
    fn tangent_large_friction_decays_momentum() {
        let t = Flat(2);
        let gm = FrictionMatrix::new(SymMatrix::from_diagonal(&[50.0, 80.0]), 1.0).unwrap();
        let o = OuFactors::new(&gm, 0.01, 0).unwrap();
        let mut ts = TangentState::new(2);
        let q = [0.0, 0.0];
        tangent_baoab_step(&mut ts, &q, &q, &t, &o, &TangentOptions { hessian_free: true, ..Default::default() })
            .unwrap();
        let e = spd_matrix_function(&gm, |l| libm::exp(-0.01 * l)).unwrap();
        assert_relative_eq!(ts.dp, e.as_matrix().clone(), epsilon = 1e-15);
    }

    fn rk4_tangent(v0: f64, gamma: f64, dt: f64, steps: usize) -> Vec<(f64, f64)> {
        let f = |x: (f64, f64)| (x.1, -v0 * x.0 - gamma * x.1);
        let mut x = (0.0, 1.0);
        let mut out = vec![x];
        for _ in 0..steps {
            let k1 = f(x);
            let k2 = f((x.0 + 0.5 * dt * k1.0, x.1 + 0.5 * dt * k1.1));
            let k3 = f((x.0 + 0.5 * dt * k2.0, x.1 + 0.5 * dt * k2.1));
            let k4 = f((x.0 + dt * k3.0, x.1 + dt * k3.1));
            x = (
                x.0 + dt / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                x.1 + dt / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
            );
            out.push(x);
        }
        out
    }

    fn scheme_tangent(v0: f64, gamma: f64, dt: f64, steps: usize, closing: ClosingKick) -> Vec<(f64, f64)> {
        let t = gauss1(v0);
        let o = ou(1, gamma, dt);
        let mut ts = TangentState::new(1);
        let mut out = vec![(0.0, 1.0)];
        let opts = TangentOptions { hessian_free: false, closing };
        for _ in 0..steps {
            tangent_baoab_step(&mut ts, &[0.3], &[0.1], &t, &o, &opts).unwrap();
            out.push((ts.dq[(0, 0)], ts.dp[(0, 0)]));
        }
        out
    }

    #[test]
    fn critically_damped_tangent_matches_rk4() {
        let dt = 0.01;
        let steps = 2500;
        let reference = rk4_tangent(1.0, 2.0, dt / 10.0, steps * 10);
        let got = scheme_tangent(1.0, 2.0, dt, steps, ClosingKick::Updated);
        for (i, g) in got.iter().enumerate() {
            let r = reference[i * 10];
            assert!((g.0 - r.0).abs() < 1e-4 && (g.1 - r.1).abs() < 1e-4, "step {i}: {g:?} vs {r:?}");
        }
        let last = got.last().unwrap();
        assert!(last.0.abs() + last.1.abs() < 1e-4);
    }

    #[test]
    fn tangent_scheme_converges_at_second_order() {
        // error of (Dq, Dp) at t = 2 under Δt halving
        let err = |dt: f64, closing| {
            let steps = (2.0 / dt) as usize;
            let r = *rk4_tangent(2.0, 0.7, dt / 20.0, steps * 20).last().unwrap();
            let g = *scheme_tangent(2.0, 0.7, dt, steps, closing).last().unwrap();
            (g.0 - r.0).abs() + (g.1 - r.1).abs()
        };
        let slope = libm::log2(err(0.02, ClosingKick::Updated) / err(0.01, ClosingKick::Updated));
        assert!((slope - 2.0).abs() < 0.2, "slope {slope}");
        let lagged = libm::log2(err(0.02, ClosingKick::Lagged) / err(0.01, ClosingKick::Lagged));
        assert!((lagged - 1.0).abs() < 0.2, "lagged slope {lagged}");
    }

    #[test]
    fn hessian_free_is_exact_on_quadratics() {
        let p = SymMatrix::from_row_slice(2, &[2.0, 0.5, 0.5, 1.0]).unwrap();
        let t = GaussianTarget::new(p).unwrap();
        let o = ou(2, 1.3, 0.05);
        let mut a = TangentState::new(2);
        let mut b = TangentState::new(2);
        for k in 0..50 {
            let q0 = [0.1 * k as f64, -0.2];
            let q1 = [0.1 * k as f64 + 0.05, -0.1];
            tangent_baoab_step(&mut a, &q0, &q1, &t, &o, &TangentOptions::default()).unwrap();
            tangent_baoab_step(&mut b, &q0, &q1, &t, &o, &TangentOptions { hessian_free: true, ..Default::default() })
                .unwrap();
        }
        assert!((&a.dq - &b.dq).amax() < 1e-10);
        assert!((&a.dp - &b.dp).amax() < 1e-10);
    }

    #[test]
    fn missing_hessian_needs_hessian_free() {
        let mut ts = TangentState::new(1);
        let r = tangent_baoab_step(&mut ts, &[0.0], &[0.0], &Flat(1), &ou(1, 1.0, 0.1), &TangentOptions::default());
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }

    #[test]
    fn directional_basis_vector_is_a_column() {
        let t = DoubleWellTarget::new(3);
        let o = ou(3, 0.8, 0.05);
        let mut full = TangentState::new(3);
        let mut dir = DirTangentState::new(vec![0.0, 1.0, 0.0]).unwrap();
        let opts = TangentOptions::default();
        for k in 0..40 {
            let x = k as f64 * 0.03;
            let q0 = [x, -x, 0.5];
            let q1 = [x + 0.01, -x, 0.4];
            tangent_baoab_step(&mut full, &q0, &q1, &t, &o, &opts).unwrap();
            dir_tangent_step(&mut dir, &q0, &q1, &t, &o, &opts).unwrap();
        }
        assert_eq!(dir.dqv.as_slice(), full.dq.column(1).as_slice());
        assert_eq!(dir.dpv.as_slice(), full.dp.column(1).as_slice());
    }

    #[test]
    fn one_dimensional_direction_is_scalar_tangent() {
        let t = DoubleWellTarget::new(1);
        let o = ou(1, 0.8, 0.05);
        let mut rng = RngStream::new(2, 2);
        let mut full = TangentState::new(1);
        let mut dir = DirTangentState::random(1, &mut rng);
        let sign = dir.direction()[0];
        let opts = TangentOptions::default();
        for k in 0..30 {
            let q0 = [0.05 * k as f64];
            let q1 = [0.05 * k as f64 + 0.02];
            tangent_baoab_step(&mut full, &q0, &q1, &t, &o, &opts).unwrap();
            dir_tangent_step(&mut dir, &q0, &q1, &t, &o, &opts).unwrap();
        }
        assert_eq!(dir.dqv[0], sign * full.dq[(0, 0)]);
    }

    #[test]
    fn overdamped_baselines() {
        // pure diffusion increments
        let t = Flat(1);
        let mut fs = ForceSource::exact();
        let mut rng = RngStream::new(8, 0);
        let dt = 0.01;
        let mut s2 = 0.0;
        let n = 50_000;
        for i in 0..n {
            let mut q = [0.0];
            overdamped_step(&mut q, &t, &mut fs, dt, &mut rng, i).unwrap();
            s2 += q[0] * q[0];
        }
        assert!((s2 / n as f64 / (2.0 * dt) - 1.0).abs() < 0.03);

        // stationary variance of a standard Gaussian
        let g = gauss1(1.0);
        let mut q = [0.0];
        let mut acc = 0.0;
        let steps = 2_000_000u64;
        for i in 0..steps {
            overdamped_step(&mut q, &g, &mut fs, dt, &mut rng, i).unwrap();
            acc += q[0] * q[0];
        }
        let v = acc / steps as f64;
        assert!((v - 1.0).abs() < 0.03, "variance {v}");
    }

    #[test]
    fn zero_j_matches_overdamped() {
        let g = GaussianTarget::isotropic(3, 2.0).unwrap();
        let mut fs = ForceSource::exact();
        let mut r1 = RngStream::new(3, 3);
        let mut r2 = RngStream::new(3, 3);
        let mut a = [0.5, -0.2, 1.0];
        let mut b = a;
        for i in 0..100 {
            overdamped_step(&mut a, &g, &mut fs, 0.01, &mut r1, i).unwrap();
            irreversible_overdamped_step(&mut b, &g, &mut fs, &Antisymmetric::zeros(3), 0.01, &mut r2, i).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn cyclic_j_layout() {
        let j = Antisymmetric::cyclic(3);
        assert_eq!(j.matrix().row(0).iter().copied().collect::<Vec<_>>(), [0.0, 1.0, -1.0]);
        assert!(Antisymmetric::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).is_err());
        let j5 = Antisymmetric::cyclic(5);
        assert_eq!((j5.matrix() + j5.matrix().transpose()).amax(), 0.0);
    }

    #[test]
    fn irreversible_drift_keeps_gaussian_mean() {
        let g = GaussianTarget::isotropic(3, 1.0).unwrap();
        let j = Antisymmetric::cyclic(3);
        let mut fs = ForceSource::exact();
        let mut rng = RngStream::new(12, 1);
        let mut q = [0.0; 3];
        let steps = 300_000u64;
        let mut mean = [0.0; 3];
        for i in 0..steps {
            irreversible_overdamped_step(&mut q, &g, &mut fs, &j, 0.02, &mut rng, i).unwrap();
            for k in 0..3 {
                mean[k] += q[k] / steps as f64;
            }
        }
        // autocorrelation time ~1/Δt steps, so the standard error is about √(1/(Δt·N))
        let se = libm::sqrt(1.0 / (0.02 * steps as f64));
        assert!(mean.iter().all(|m| m.abs() < 4.0 * se), "{mean:?}");
    }

    #[test]
    fn divergence_is_reported() {
        struct Steep;
        impl Target for Steep {
            fn dim(&self) -> usize {
                1
            }
            fn potential(&self, _: &[f64]) -> Option<f64> {
                None
            }
            fn gradient_into(&self, q: &[f64], out: &mut [f64]) {
                out[0] = -q[0] * q[0] * q[0] - 1.0;
            }
        }
        let mut fs = ForceSource::exact();
        let mut s = PhaseState::zeros(&Steep, &mut fs).unwrap();
        let o = ou(1, 1.0, 0.5);
        let mut rng = RngStream::new(0, 0);
        let mut err = None;
        for _ in 0..100 {
            if let Err(e) = baoab_step(&mut s, &Steep, &mut fs, &o, &mut rng) {
                err = Some(e);
                break;
            }
        }
        assert!(matches!(err, Some(Error::Divergence { .. })));
    }

    proptest! {
        #[test]
        fn directional_tangent_is_linear(a in -1.0f64..1.0, b in -1.0f64..1.0) {
            prop_assume!(a * a + b * b > 1e-4);
            let t = DoubleWellTarget::new(2);
            let o = ou(2, 0.6, 0.05);
            let norm = libm::sqrt(a * a + b * b);
            let mut full = TangentState::new(2);
            let mut dir = DirTangentState::new(vec![a / norm, b / norm]).unwrap();
            let opts = TangentOptions::default();
            for k in 0..20 {
                let q0 = [0.1 * k as f64, 0.3];
                let q1 = [0.1 * k as f64 + 0.04, 0.25];
                tangent_baoab_step(&mut full, &q0, &q1, &t, &o, &opts).unwrap();
                dir_tangent_step(&mut dir, &q0, &q1, &t, &o, &opts).unwrap();
            }
            for i in 0..2 {
                let want = (a * full.dq[(i, 0)] + b * full.dq[(i, 1)]) / norm;
                prop_assert!((dir.dqv[i] - want).abs() <= 1e-12);
            }
        }

        #[test]
        fn lyapunov_form_does_not_grow(v0 in 0.5f64..4.0, gamma in 0.5f64..4.0) {
            // Q = V0, U0 = V0 on a 1D Gaussian; b from the contraction proof.
            let b = (v0 / (2.0 * v0 * v0)).min(v0 / 4.0).min(0.5 * libm::sqrt(v0));
            let dt = 0.005;
            let t = gauss1(v0);
            let o = ou(1, gamma, dt);
            let mut ts = TangentState::new(1);
            let form = |ts: &TangentState| {
                let (x, y) = (ts.dq[(0, 0)], ts.dp[(0, 0)]);
                v0 * x * x + 2.0 * b * x * y + y * y
            };
            let mut prev = form(&ts);
            for _ in 0..2000 {
                tangent_baoab_step(&mut ts, &[0.0], &[0.0], &t, &o, &TangentOptions::default()).unwrap();
                let now = form(&ts);
                prop_assert!(now <= prev * (1.0 + 10.0 * dt * dt) + 1e-300, "{} > {}", now, prev);
                prev = now;
            }
        }
    }
}
