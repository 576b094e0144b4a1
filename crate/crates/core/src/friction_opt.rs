//! Stochastic optimisation of a constant friction matrix.
//!
//! A single BAOAB trajectory supplies thinned starting points. From each one a
//! momentum-reversed replica is launched, and both are carried with their
//! tangent processes until the tangents have decayed. The block sums
//! `ζ = Σ ∇f(q)ᵀ Dq Δt` and `ζ̃` along the two give the proposal
//! `b = −ζ ⊗ ζ̃`, an estimate of the descent direction `−½ ∇σ²(Γ)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::integrators::{baoab_step, tangent_baoab_step, ForceSource, OuFactors, PhaseState, TangentOptions, TangentState};
use crate::linalg::{project_pd, symmetrize, FrictionMatrix, SymMatrix};
use crate::observables::{row_times, ObservableSet};
use crate::rng::RngStream;
use crate::targets::Target;
use crate::variance::quadratic_form;

/// Which matrices the friction is restricted to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintMode {
    Full,
    Diagonal,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    GradientDescent,
    HeavyBall,
}

/// What happens when the tangents have not decayed at a block boundary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnUnconverged {
    /// Keep integrating and test again at the next boundary.
    Extend,
    /// Drop the block and restart the replicas from the current state.
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSchedule {
    Constant,
    /// `α / √j` at the `j`-th update.
    InvSqrt,
}

#[derive(Debug, Clone)]
pub struct OptConfig {
    pub dt: f64,
    /// Steps between convergence checks (`T`).
    pub block_len: usize,
    /// Plain BAOAB steps before the first block (`B`).
    pub burn_in: usize,
    /// Converged blocks averaged into one proposal.
    pub blocks_per_proposal: usize,
    /// Proposals per friction update (`G`).
    pub proposals_per_update: usize,
    /// Coupled replica pairs averaged inside each block (`K`).
    pub replicas: usize,
    pub d_conv: f64,
    pub step_size: f64,
    /// Heavy-ball damping `r`.
    pub anneal: f64,
    /// Eigenvalue floor `μ`.
    pub floor: f64,
    pub mode: ConstraintMode,
    pub update_rule: UpdateRule,
    pub on_unconverged: OnUnconverged,
    pub schedule: StepSchedule,
    pub tangent: TangentOptions,
    /// Total steps including burn-in.
    pub epochs: usize,
    /// Defaults to the identity.
    pub initial_gamma: Option<SymMatrix>,
    pub initial_q: Option<Vec<f64>>,
    pub minibatch: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        OptConfig {
            dt: 0.08,
            block_len: 125,
            burn_in: 100,
            blocks_per_proposal: 1,
            proposals_per_update: 1,
            replicas: 1,
            d_conv: 2e-4,
            step_size: 1.0,
            anneal: 0.5,
            floor: 0.2,
            mode: ConstraintMode::Full,
            update_rule: UpdateRule::HeavyBall,
            on_unconverged: OnUnconverged::Extend,
            schedule: StepSchedule::Constant,
            tangent: TangentOptions::default(),
            epochs: 50_000,
            initial_gamma: None,
            initial_q: None,
            minibatch: false,
        }
    }
}

impl OptConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: alloc::string::String| Err(Error::Config(m));
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if self.block_len == 0 || self.blocks_per_proposal == 0 || self.proposals_per_update == 0 || self.replicas == 0 {
            return bad("block length, blocks per proposal, proposals per update and replicas must be positive".into());
        }
        if !(self.d_conv > 0.0) {
            return bad(format!("d_conv must be positive, got {}", self.d_conv));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be nonnegative, got {}", self.step_size));
        }
        if !(self.anneal >= 0.0 && self.anneal.is_finite()) {
            return bad(format!("anneal factor must be nonnegative, got {}", self.anneal));
        }
        if !(self.floor > 0.0) {
            return bad(format!("eigenvalue floor must be positive, got {}", self.floor));
        }
        if let Some(g) = &self.initial_gamma {
            if g.dim() != n {
                return Err(Error::Dimension(format!("initial friction is {0}x{0}, target dimension {n}", g.dim())));
            }
        }
        if let Some(q) = &self.initial_q {
            if q.len() != n {
                return Err(Error::Dimension(format!("initial state of length {}, target dimension {n}", q.len())));
            }
        }
        Ok(())
    }
}

/// Running block sums for every observable, on the primary and reversed paths.
#[derive(Debug, Clone)]
pub struct ZetaAccumulator {
    /// Row `m` is `ζ` for observable `m`.
    pub zeta: DMatrix<f64>,
    pub zeta_flip: DMatrix<f64>,
    /// Step at which the block started.
    pub start: u64,
}

impl ZetaAccumulator {
    pub fn new(observables: usize, n: usize, start: u64) -> Self {
        Self { zeta: DMatrix::zeros(observables, n), zeta_flip: DMatrix::zeros(observables, n), start }
    }

    pub fn reset(&mut self, start: u64) {
        self.zeta.fill(0.0);
        self.zeta_flip.fill(0.0);
        self.start = start;
    }

    /// `ζ += ∇f(q)ᵀ Dq Δt`, `ζ̃ += ∇f(q̃)ᵀ Dq̃ Δt`.
    pub fn accumulate(
        &mut self,
        fs: &ObservableSet,
        q: &[f64],
        dq: &DMatrix<f64>,
        q_flip: &[f64],
        dq_flip: &DMatrix<f64>,
        dt: f64,
    ) {
        add_rows(&mut self.zeta, fs, q, dq, dt);
        add_rows(&mut self.zeta_flip, fs, q_flip, dq_flip, dt);
    }

    /// `−Σ_m w_m ζ_m ⊗ ζ̃_m`.
    pub fn proposal(&self, weights: &[f64]) -> DMatrix<f64> {
        let n = self.zeta.ncols();
        let mut b = DMatrix::zeros(n, n);
        for (m, &w) in weights.iter().enumerate() {
            b -= w * self.zeta.row(m).transpose() * self.zeta_flip.row(m);
        }
        b
    }
}

fn add_rows(rows: &mut DMatrix<f64>, fs: &ObservableSet, q: &[f64], dq: &DMatrix<f64>, scale: f64) {
    for (m, f) in fs.members().iter().enumerate() {
        let g = f.grad(q);
        for (j, v) in row_times(&g, dq).into_iter().enumerate() {
            rows[(m, j)] += scale * v;
        }
    }
}

/// True when every tangent entry is below `d_conv` in magnitude.
pub fn tangents_converged<'a>(tangents: impl IntoIterator<Item = &'a TangentState>, d_conv: f64) -> bool {
    tangents.into_iter().all(|t| t.max_abs() < d_conv)
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub gamma: FrictionMatrix,
    /// Heavy-ball velocity.
    pub theta: SymMatrix,
    pub pending: Vec<DMatrix<f64>>,
    pub updates: u64,
}

impl OptimizerState {
    pub fn new(gamma: FrictionMatrix) -> Self {
        let n = gamma.dim();
        Self { gamma, theta: SymMatrix::zeros(n), pending: Vec::new(), updates: 0 }
    }

    /// Consumes the pending proposals and moves the friction.
    pub fn update_gamma(&mut self, cfg: &OptConfig) -> Result<()> {
        if self.pending.is_empty() {
            return Err(Error::Logic("friction update without pending proposals".into()));
        }
        self.updates += 1;
        let alpha = match cfg.schedule {
            StepSchedule::Constant => cfg.step_size,
            StepSchedule::InvSqrt => cfg.step_size / libm::sqrt(self.updates as f64),
        };
        let n = self.gamma.dim();
        let g = self.pending.len() as f64;
        let mut sum = DMatrix::zeros(n, n);
        for b in self.pending.drain(..) {
            sum += &b + b.transpose();
        }
        let step = constrain(sum * (alpha / (2.0 * g)), cfg.mode);
        let moved = match cfg.update_rule {
            UpdateRule::GradientDescent => self.gamma.mat().as_matrix() + step,
            UpdateRule::HeavyBall => {
                let theta = self.theta.as_matrix() * (1.0 - alpha * cfg.anneal) + step;
                self.theta = symmetrize(&theta)?;
                self.gamma.mat().as_matrix() + theta * alpha
            }
        };
        self.gamma = project(&symmetrize(&moved)?, cfg.floor, cfg.mode)?;
        Ok(())
    }
}

fn constrain(mut m: DMatrix<f64>, mode: ConstraintMode) -> DMatrix<f64> {
    let n = m.nrows();
    match mode {
        ConstraintMode::Full => m,
        ConstraintMode::Diagonal => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        m[(i, j)] = 0.0;
                    }
                }
            }
            m
        }
        ConstraintMode::Scalar => DMatrix::identity(n, n) * (m.trace() / n as f64),
    }
}

fn project(m: &SymMatrix, floor: f64, mode: ConstraintMode) -> Result<FrictionMatrix> {
    match mode {
        ConstraintMode::Full => project_pd(m, floor),
        ConstraintMode::Diagonal | ConstraintMode::Scalar => {
            let d: Vec<f64> = m.diagonal().iter().map(|&x| x.max(floor)).collect();
            FrictionMatrix::new(SymMatrix::from_diagonal(&d), floor)
        }
    }
}

/// Friction after an update, stamped with the step at which it took effect.
#[derive(Debug, Clone)]
pub struct GammaPoint {
    pub epoch: u64,
    pub gamma: SymMatrix,
}

/// One converged block.
#[derive(Debug, Clone)]
pub struct BlockRecord {
    /// Step at which the block closed.
    pub epoch: u64,
    /// `ζ` rows on the primary path, one per observable.
    pub zeta: DMatrix<f64>,
    /// The block's proposal `−Σ w ζ ⊗ ζ̃`.
    pub proposal: DMatrix<f64>,
    /// `2 Σ_m w_m ζ_m Γ ζ_mᵀ` at the friction in force during the block.
    pub proxy: f64,
}

#[derive(Debug, Clone)]
pub struct OptimizerRun {
    pub trajectory: Vec<GammaPoint>,
    pub blocks: Vec<BlockRecord>,
    /// Failed convergence checks (`L*`).
    pub unconverged_checks: u64,
    pub updates: u64,
    pub epochs_run: u64,
    pub final_gamma: FrictionMatrix,
    /// Position of the sampling chain at the last step.
    pub final_q: Vec<f64>,
    /// Set when a state or tangent blew up; the records up to that point are kept.
    pub divergence: Option<Error>,
}

impl OptimizerRun {
    /// Step-weighted mean of the friction over the last `frac` of the run.
    pub fn tail_mean(&self, frac: f64) -> SymMatrix {
        let end = self.epochs_run as f64;
        let from = end * (1.0 - frac.clamp(0.0, 1.0));
        let n = self.final_gamma.dim();
        let mut acc = DMatrix::zeros(n, n);
        let mut total = 0.0;
        for (i, pt) in self.trajectory.iter().enumerate() {
            let a = (pt.epoch as f64).max(from);
            let b = self.trajectory.get(i + 1).map_or(end, |nx| nx.epoch as f64);
            if b > a {
                acc += pt.gamma.as_matrix() * (b - a);
                total += b - a;
            }
        }
        if total == 0.0 {
            return self.final_gamma.mat().clone();
        }
        SymMatrix::new(acc / total).expect("square by construction")
    }

    /// Minimum and maximum of every friction entry over the last `frac` of
    /// the trajectory points.
    pub fn tail_range(&self, frac: f64) -> (f64, f64) {
        let from = self.epochs_run as f64 * (1.0 - frac.clamp(0.0, 1.0));
        let start = self.trajectory.iter().rposition(|p| (p.epoch as f64) <= from).unwrap_or(0);
        self.trajectory[start..].iter().flat_map(|p| p.gamma.to_row_major()).fold(
            (f64::INFINITY, f64::NEG_INFINITY),
            |(lo, hi), v| (lo.min(v), hi.max(v)),
        )
    }
}

struct Walker {
    state: PhaseState,
    tangent: TangentState,
    forces: ForceSource,
    noise: RngStream,
    prev_q: Vec<f64>,
}

impl Walker {
    fn new(target: &dyn Target, rng: &RngStream, id: u64, minibatch: bool, q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        let mut forces = if minibatch { ForceSource::minibatch(rng.derive(1_000_000 + id)) } else { ForceSource::exact() };
        let n = q.len();
        let state = PhaseState::new(target, &mut forces, q, p)?;
        Ok(Self { state, tangent: TangentState::new(n), forces, noise: rng.derive(id), prev_q: vec![0.0; n] })
    }

    fn step(&mut self, target: &dyn Target, ou: &OuFactors, opts: &TangentOptions, with_tangent: bool) -> Result<()> {
        self.prev_q.copy_from_slice(&self.state.q);
        baoab_step(&mut self.state, target, &mut self.forces, ou, &mut self.noise)?;
        if with_tangent {
            tangent_baoab_step(&mut self.tangent, &self.prev_q, &self.state.q, target, ou, opts)?;
        }
        Ok(())
    }

    fn restart_from(&mut self, other: &PhaseState, sign: f64) {
        self.state.copy_from(other, sign);
        self.tangent.reset();
    }
}

struct Block {
    acc: ZetaAccumulator,
    sum: DMatrix<f64>,
    count: usize,
}

fn with_epoch(e: Error, epoch: u64) -> Error {
    match e {
        Error::Divergence { detail, .. } => Error::Divergence { step: epoch, detail },
        other => other,
    }
}

/// Runs the thinned-trajectory optimiser for `cfg.epochs` steps.
pub fn run_optimizer(target: &dyn Target, fs: &ObservableSet, cfg: &OptConfig, rng: &RngStream) -> Result<OptimizerRun> {
    let n = target.dim();
    fs.validate(n)?;
    cfg.validate(n)?;
    if cfg.minibatch && !target.has_minibatch() {
        return Err(Error::Unsupported("minibatch_gradient"));
    }
    if !cfg.tangent.hessian_free && !target.has_hessian() {
        return Err(Error::Unsupported("hessian_vec"));
    }
    let g0 = cfg.initial_gamma.clone().unwrap_or_else(|| SymMatrix::identity(n));
    let g0 = match cfg.mode {
        ConstraintMode::Full => g0,
        mode => SymMatrix::new(constrain(g0.into_matrix(), mode))?,
    };
    let mut opt = OptimizerState::new(FrictionMatrix::new(g0, cfg.floor)?);
    let mut ou = OuFactors::new(&opt.gamma, cfg.dt, 0)?;
    let q0 = cfg.initial_q.clone().unwrap_or_else(|| vec![0.0; n]);
    let k = cfg.replicas;
    // Walker 0 is the sampling chain; 1..k are extra primaries, k..2k reversed replicas.
    let mut walkers = Vec::with_capacity(2 * k);
    for id in 0..2 * k as u64 {
        walkers.push(Walker::new(target, rng, id, cfg.minibatch, q0.clone(), vec![0.0; n])?);
    }
    let mut run = OptimizerRun {
        trajectory: vec![GammaPoint { epoch: 0, gamma: opt.gamma.mat().clone() }],
        blocks: Vec::new(),
        unconverged_checks: 0,
        updates: 0,
        epochs_run: 0,
        final_gamma: opt.gamma.clone(),
        final_q: q0.clone(),
        divergence: None,
    };
    let burn = cfg.burn_in.min(cfg.epochs);
    for i in 0..burn {
        if let Err(e) = walkers[0].step(target, &ou, &cfg.tangent, false) {
            run.divergence = Some(with_epoch(e, i as u64 + 1));
            run.epochs_run = i as u64 + 1;
            run.final_q = walkers[0].state.q.clone();
            return Ok(run);
        }
    }
    run.epochs_run = burn as u64;
    let mut block = Block { acc: ZetaAccumulator::new(fs.len(), n, burn as u64), sum: DMatrix::zeros(n, n), count: 0 };
    let restart = |walkers: &mut Vec<Walker>| {
        let (head, rest) = walkers.split_at_mut(1);
        head[0].tangent.reset();
        for (j, w) in rest.iter_mut().enumerate() {
            let sign = if j + 1 < k { 1.0 } else { -1.0 };
            w.restart_from(&head[0].state, sign);
        }
    };
    restart(&mut walkers);
    let scale = cfg.dt / k as f64;
    for i in burn..cfg.epochs {
        let epoch = i as u64 + 1;
        for w in walkers.iter_mut() {
            if let Err(e) = w.step(target, &ou, &cfg.tangent, true) {
                run.divergence = Some(with_epoch(e, epoch));
                run.epochs_run = epoch;
                run.final_gamma = opt.gamma.clone();
                run.updates = opt.updates;
                run.final_q = walkers[0].state.q.clone();
                return Ok(run);
            }
        }
        for j in 0..k {
            let (p, f) = (&walkers[j], &walkers[k + j]);
            add_rows(&mut block.acc.zeta, fs, &p.state.q, &p.tangent.dq, scale);
            add_rows(&mut block.acc.zeta_flip, fs, &f.state.q, &f.tangent.dq, scale);
        }
        run.epochs_run = epoch;
        if (i + 1 - burn) % cfg.block_len != 0 {
            continue;
        }
        if !tangents_converged(walkers.iter().map(|w| &w.tangent), cfg.d_conv) {
            run.unconverged_checks += 1;
            if cfg.on_unconverged == OnUnconverged::Discard {
                block.acc.reset(epoch);
                restart(&mut walkers);
            }
            continue;
        }
        let b = block.acc.proposal(fs.weights());
        let mut proxy = 0.0;
        for (m, &w) in fs.weights().iter().enumerate() {
            let row: Vec<f64> = block.acc.zeta.row(m).iter().copied().collect();
            proxy += 2.0 * w * quadratic_form(&row, opt.gamma.mat())?;
        }
        run.blocks.push(BlockRecord { epoch, zeta: block.acc.zeta.clone(), proposal: b.clone(), proxy });
        block.sum += b;
        block.count += 1;
        block.acc.reset(epoch);
        restart(&mut walkers);
        if block.count == cfg.blocks_per_proposal {
            opt.pending.push(&block.sum / block.count as f64);
            block.sum.fill(0.0);
            block.count = 0;
        }
        if opt.pending.len() == cfg.proposals_per_update {
            opt.update_gamma(cfg)?;
            ou = OuFactors::new(&opt.gamma, cfg.dt, opt.updates)?;
            run.trajectory.push(GammaPoint { epoch, gamma: opt.gamma.mat().clone() });
        }
    }
    run.final_gamma = opt.gamma.clone();
    run.updates = opt.updates;
    run.final_q = walkers[0].state.q.clone();
    Ok(run)
}

/// Settings for the independent-realisations estimator.
#[derive(Debug, Clone)]
pub struct IndependentConfig {
    pub dt: f64,
    pub burn_in: usize,
    /// Steps the tangent pairs are integrated after burn-in.
    pub horizon: usize,
    /// Outer samples `L`.
    pub samples: usize,
    /// Inner replicas `K` per branch.
    pub replicas: usize,
    pub tangent: TangentOptions,
    pub minibatch: bool,
}

/// Mean of the symmetrised per-sample estimates and its standard error.
#[derive(Debug, Clone)]
pub struct DeltaGammaEstimate {
    pub mean: SymMatrix,
    pub stderr: DMatrix<f64>,
    pub samples: usize,
}

/// One outer sample: a burn-in chain from the origin, then `K` replicas from
/// `(q, p)` and `K` from `(q, −p)` with independent noise.
pub fn independent_sample(
    target: &dyn Target,
    fs: &ObservableSet,
    gamma: &FrictionMatrix,
    cfg: &IndependentConfig,
    rng: &RngStream,
) -> Result<DMatrix<f64>> {
    let n = target.dim();
    fs.validate(n)?;
    if cfg.replicas == 0 || cfg.horizon == 0 {
        return Err(Error::Config("replicas and horizon must be positive".into()));
    }
    if !cfg.tangent.hessian_free && !target.has_hessian() {
        return Err(Error::Unsupported("hessian_vec"));
    }
    let ou = OuFactors::new(gamma, cfg.dt, 0)?;
    let mut base = Walker::new(target, rng, 0, cfg.minibatch, vec![0.0; n], vec![0.0; n])?;
    for i in 0..cfg.burn_in {
        base.step(target, &ou, &cfg.tangent, false).map_err(|e| with_epoch(e, i as u64 + 1))?;
    }
    let k = cfg.replicas;
    let mut acc = ZetaAccumulator::new(fs.len(), n, cfg.burn_in as u64);
    let scale = cfg.dt / k as f64;
    for r in 0..k {
        for (sign, id) in [(1.0, 1 + r as u64), (-1.0, 1 + (k + r) as u64)] {
            let mut w = Walker::new(target, rng, id, cfg.minibatch, vec![0.0; n], vec![0.0; n])?;
            w.restart_from(&base.state, sign);
            let rows = if sign > 0.0 { &mut acc.zeta } else { &mut acc.zeta_flip };
            for i in 0..cfg.horizon {
                w.step(target, &ou, &cfg.tangent, true)
                    .map_err(|e| with_epoch(e, (cfg.burn_in + i) as u64 + 1))?;
                add_rows(rows, fs, &w.state.q, &w.tangent.dq, scale);
            }
        }
    }
    Ok(acc.proposal(fs.weights()))
}

/// Averages per-sample estimates after symmetrising each.
pub fn summarize_samples(samples: &[DMatrix<f64>]) -> Result<DeltaGammaEstimate> {
    let first = samples.first().ok_or_else(|| Error::Data("no samples to average".into()))?;
    let n = first.nrows();
    let l = samples.len() as f64;
    let sym: Vec<DMatrix<f64>> = samples.iter().map(|b| (b + b.transpose()) * 0.5).collect();
    let mean = sym.iter().fold(DMatrix::zeros(n, n), |a, b| a + b) / l;
    let stderr = if samples.len() > 1 {
        let var = sym.iter().fold(DMatrix::zeros(n, n), |a, b| a + (b - &mean).map(|x| x * x)) / (l - 1.0);
        var.map(|v| libm::sqrt(v / l))
    } else {
        DMatrix::from_element(n, n, f64::NAN)
    };
    Ok(DeltaGammaEstimate { mean: SymMatrix::new(mean)?, stderr, samples: samples.len() })
}

/// Sequential estimator; sample `l` draws from `rng.derive(l)`.
pub fn estimate_delta_gamma_independent(
    target: &dyn Target,
    fs: &ObservableSet,
    gamma: &FrictionMatrix,
    cfg: &IndependentConfig,
    rng: &RngStream,
) -> Result<DeltaGammaEstimate> {
    let samples = (0..cfg.samples as u64)
        .map(|l| independent_sample(target, fs, gamma, cfg, &rng.derive(l)))
        .collect::<Result<Vec<_>>>()?;
    summarize_samples(&samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::Observable;
    use crate::targets::GaussianTarget;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn quad1d() -> (GaussianTarget, ObservableSet) {
        let t = GaussianTarget::isotropic(1, 5.0).unwrap();
        let f = ObservableSet::single(Observable::Polynomial1d(vec![0.0, 0.0, 0.5]));
        (t, f)
    }

    #[test]
    fn accumulate_examples() {
        let fs = ObservableSet::single(Observable::Linear(vec![2.0, -1.0]));
        let mut acc = ZetaAccumulator::new(1, 2, 0);
        let id = DMatrix::identity(2, 2);
        acc.accumulate(&fs, &[0.3, 0.4], &id, &[0.0, 0.0], &id, 0.1);
        assert_relative_eq!(acc.zeta[(0, 0)], 0.2, epsilon = 1e-15);
        assert_relative_eq!(acc.zeta[(0, 1)], -0.1, epsilon = 1e-15);
        // two steps on a 1D quadratic: f' = q
        let fq = ObservableSet::single(Observable::Polynomial1d(vec![0.0, 0.0, 0.5]));
        let mut a1 = ZetaAccumulator::new(1, 1, 0);
        let d1 = DMatrix::from_element(1, 1, 0.5);
        let d2 = DMatrix::from_element(1, 1, 0.25);
        a1.accumulate(&fq, &[2.0], &d1, &[1.0], &d1, 0.1);
        a1.accumulate(&fq, &[4.0], &d2, &[-1.0], &d2, 0.1);
        assert_relative_eq!(a1.zeta[(0, 0)], 0.1 * (1.0 + 1.0), epsilon = 1e-15);
        assert_relative_eq!(a1.zeta_flip[(0, 0)], 0.1 * (0.5 - 0.25), epsilon = 1e-15);
        let zero = ObservableSet::single(Observable::Linear(vec![0.0, 0.0]));
        let mut a0 = ZetaAccumulator::new(1, 2, 0);
        a0.accumulate(&zero, &[1.0, 1.0], &id, &[1.0, 1.0], &id, 0.1);
        assert_eq!(a0.zeta.amax(), 0.0);
    }

    #[test]
    fn proposal_is_negative_outer_product() {
        let mut acc = ZetaAccumulator::new(1, 2, 0);
        acc.zeta[(0, 0)] = 1.0;
        acc.zeta_flip[(0, 1)] = 1.0;
        let b = acc.proposal(&[1.0]);
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 0.0, 0.0]));
        let mut one = ZetaAccumulator::new(1, 1, 0);
        one.zeta[(0, 0)] = 1.0;
        one.zeta_flip[(0, 0)] = 1.0;
        assert_eq!(one.proposal(&[1.0])[(0, 0)], -1.0);
    }

    fn state(g: f64, n: usize) -> OptimizerState {
        OptimizerState::new(FrictionMatrix::scalar(n, g, 0.2).unwrap())
    }

    #[test]
    fn update_examples() {
        let gd = OptConfig { update_rule: UpdateRule::GradientDescent, step_size: 1.0, floor: 0.2, ..Default::default() };
        let mut s = state(2.0, 2);
        s.pending.push(-DMatrix::identity(2, 2));
        s.update_gamma(&gd).unwrap();
        assert!((s.gamma.mat().as_matrix() - DMatrix::identity(2, 2)).amax() < 1e-12);

        let mut s = state(0.3, 2);
        s.pending.push(-DMatrix::identity(2, 2));
        s.update_gamma(&gd).unwrap();
        assert!((s.gamma.mat().as_matrix() - DMatrix::identity(2, 2) * 0.2).amax() < 1e-12);

        let hb = OptConfig { update_rule: UpdateRule::HeavyBall, anneal: 0.5, step_size: 1.0, ..Default::default() };
        let mut s = state(2.5, 1);
        s.pending.push(-DMatrix::identity(1, 1));
        s.update_gamma(&hb).unwrap();
        assert_relative_eq!(s.theta.get(0, 0), -1.0);
        assert_relative_eq!(s.gamma.mat().get(0, 0), 1.5);

        let mut empty = state(1.0, 1);
        assert!(matches!(empty.update_gamma(&gd), Err(Error::Logic(_))));
    }

    #[test]
    fn modes_restrict_the_step() {
        let b = DMatrix::from_row_slice(2, 2, &[0.2, 0.5, 0.1, -0.4]);
        let diag = OptConfig { update_rule: UpdateRule::GradientDescent, mode: ConstraintMode::Diagonal, ..Default::default() };
        let mut s = state(1.0, 2);
        s.pending.push(b.clone());
        s.update_gamma(&diag).unwrap();
        let m = s.gamma.mat();
        assert_eq!(m.get(0, 1), 0.0);
        assert_relative_eq!(m.get(0, 0), 1.2, epsilon = 1e-14);
        assert_relative_eq!(m.get(1, 1), 0.6, epsilon = 1e-14);

        let scalar = OptConfig { mode: ConstraintMode::Scalar, ..diag };
        let mut s = state(1.0, 2);
        s.pending.push(b);
        s.update_gamma(&scalar).unwrap();
        assert_relative_eq!(s.gamma.mat().get(0, 0), 0.9, epsilon = 1e-14);
        assert_relative_eq!(s.gamma.mat().get(1, 1), 0.9, epsilon = 1e-14);
    }

    #[test]
    fn pending_average_uses_proposal_count() {
        let gd = OptConfig { update_rule: UpdateRule::GradientDescent, proposals_per_update: 2, ..Default::default() };
        let mut s = state(2.0, 1);
        s.pending.push(DMatrix::from_element(1, 1, -1.0));
        s.pending.push(DMatrix::from_element(1, 1, -3.0));
        s.update_gamma(&gd).unwrap();
        assert_relative_eq!(s.gamma.mat().get(0, 0), 0.2_f64.max(2.0 - 2.0), epsilon = 1e-14);
        assert!(s.pending.is_empty());
    }

    #[test]
    fn frozen_friction_reproduces_plain_sampler() {
        let (t, fs) = quad1d();
        let cfg = OptConfig { step_size: 0.0, epochs: 3000, ..Default::default() };
        let rng = RngStream::new(11, 0);
        let run = run_optimizer(&t, &fs, &cfg, &rng).unwrap();
        assert!(run.updates > 0);
        assert!(run.trajectory.iter().all(|p| p.gamma.get(0, 0) == 1.0));
        let mut forces = ForceSource::exact();
        let mut s = PhaseState::zeros(&t, &mut forces).unwrap();
        let ou = OuFactors::new(&FrictionMatrix::scalar(1, 1.0, 0.2).unwrap(), cfg.dt, 0).unwrap();
        let mut noise = rng.derive(0);
        for _ in 0..3000 {
            baoab_step(&mut s, &t, &mut forces, &ou, &mut noise).unwrap();
        }
        assert_eq!(run.final_q, s.q);
    }

    #[test]
    fn friction_stays_above_floor_and_scalar_matches_full() {
        let (t, fs) = quad1d();
        let cfg = OptConfig { epochs: 20_000, ..Default::default() };
        let rng = RngStream::new(4, 0);
        let full = run_optimizer(&t, &fs, &cfg, &rng).unwrap();
        let scalar = run_optimizer(&t, &fs, &OptConfig { mode: ConstraintMode::Scalar, ..cfg.clone() }, &rng).unwrap();
        assert!(full.updates > 10);
        for (a, b) in full.trajectory.iter().zip(&scalar.trajectory) {
            assert!(a.gamma.get(0, 0) >= 0.2 - 1e-10);
            assert_eq!(a.gamma.get(0, 0).to_bits(), b.gamma.get(0, 0).to_bits());
        }
        assert_eq!(full.trajectory.len(), scalar.trajectory.len());
    }

    #[test]
    fn discard_counts_failed_checks() {
        let (t, fs) = quad1d();
        // tiny tolerance: nothing converges
        let cfg = OptConfig { epochs: 2000, d_conv: 1e-30, on_unconverged: OnUnconverged::Discard, ..Default::default() };
        let run = run_optimizer(&t, &fs, &cfg, &RngStream::new(1, 0)).unwrap();
        assert!(run.blocks.is_empty());
        assert_eq!(run.unconverged_checks, ((2000 - 100) / 125) as u64);
        assert_eq!(run.trajectory.len(), 1);
    }

    #[test]
    fn divergence_is_reported_with_partial_records() {
        let t = GaussianTarget::isotropic(1, 1e4).unwrap();
        let fs = ObservableSet::single(Observable::Coordinate(0));
        let cfg = OptConfig { dt: 0.5, epochs: 1000, burn_in: 0, ..Default::default() };
        let run = run_optimizer(&t, &fs, &cfg, &RngStream::new(1, 0)).unwrap();
        assert!(matches!(run.divergence, Some(Error::Divergence { .. })));
        assert!(run.epochs_run < 1000);
    }

    #[test]
    fn multi_observable_additivity() {
        let t = GaussianTarget::new(SymMatrix::from_row_slice(2, &[2.0, 0.3, 0.3, 1.0]).unwrap()).unwrap();
        let f1 = Observable::Coordinate(0);
        let f2 = Observable::NormSquared;
        let cfg = OptConfig { epochs: 3000, step_size: 0.0, dt: 0.1, block_len: 100, d_conv: 1e-2, ..Default::default() };
        let rng = RngStream::new(8, 0);
        let both = ObservableSet::with_weights(vec![f1.clone(), f2.clone()], vec![0.5, 2.0]).unwrap();
        let r = run_optimizer(&t, &both, &cfg, &rng).unwrap();
        let r1 = run_optimizer(&t, &ObservableSet::single(f1), &cfg, &rng).unwrap();
        let r2 = run_optimizer(&t, &ObservableSet::single(f2), &cfg, &rng).unwrap();
        assert!(!r.blocks.is_empty());
        for ((a, b), c) in r.blocks.iter().zip(&r1.blocks).zip(&r2.blocks) {
            let sum = &b.proposal * 0.5 + &c.proposal * 2.0;
            assert!((&a.proposal - sum).amax() <= 1e-12 * (1.0 + a.proposal.amax()));
        }
    }

    #[test]
    fn independent_estimator_signs() {
        // f = q on N(0,1): σ² = 2γ, so ΔΓ = −1 at every γ
        let t = GaussianTarget::isotropic(1, 1.0).unwrap();
        let fs = ObservableSet::single(Observable::Coordinate(0));
        let cfg = IndependentConfig {
            dt: 0.05,
            burn_in: 100,
            horizon: 400,
            samples: 300,
            replicas: 4,
            tangent: TangentOptions::default(),
            minibatch: false,
        };
        let g = FrictionMatrix::scalar(1, 1.0, 0.1).unwrap();
        let est = estimate_delta_gamma_independent(&t, &fs, &g, &cfg, &RngStream::new(3, 0)).unwrap();
        let m = est.mean.get(0, 0);
        assert!(m < 0.0 && (m + 1.0).abs() < 4.0 * est.stderr[(0, 0)] + 0.1, "{m} ± {}", est.stderr[(0, 0)]);
    }

    proptest! {
        #[test]
        fn projection_keeps_floor(a in -3.0f64..3.0, b in -3.0f64..3.0, c in -3.0f64..3.0) {
            let gd = OptConfig { update_rule: UpdateRule::GradientDescent, ..Default::default() };
            let mut s = state(1.0, 2);
            s.pending.push(DMatrix::from_row_slice(2, 2, &[a, b, c, -a]));
            s.update_gamma(&gd).unwrap();
            prop_assert!(s.gamma.mat().min_eigenvalue().unwrap() >= 0.2 - 1e-10);
        }
    }
}
