//! Fixed-parameter runs that record observable values along the path.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::integrators::{
    baoab_step, irreversible_overdamped_step, overdamped_step, Antisymmetric, ForceSource, OuFactors, PhaseState,
};
use crate::linalg::FrictionMatrix;
use crate::observables::ObservableSet;
use crate::rng::RngStream;
use crate::targets::Target;

/// Which dynamics generates the path.
#[derive(Debug, Clone)]
pub enum Dynamics {
    Underdamped(FrictionMatrix),
    Overdamped,
    Irreversible(Antisymmetric),
}

#[derive(Debug, Clone)]
pub struct PathConfig {
    pub dt: f64,
    /// Steps after the initial state; `values` holds `steps + 1` entries.
    pub steps: usize,
    pub minibatch: bool,
    pub initial_q: Option<Vec<f64>>,
}

/// Observable values `values[m][i] = f_m(q^i)` for `i = 0..=steps`.
#[derive(Debug, Clone)]
pub struct SamplePath {
    pub values: Vec<Vec<f64>>,
    pub final_q: Vec<f64>,
    pub final_p: Option<Vec<f64>>,
}

/// Runs the chosen dynamics from `initial_q` (default zero) with zero momentum.
pub fn run_path(
    target: &dyn Target,
    fs: &ObservableSet,
    dynamics: &Dynamics,
    cfg: &PathConfig,
    rng: &RngStream,
) -> Result<SamplePath> {
    let n = target.dim();
    fs.validate(n)?;
    if cfg.minibatch && !target.has_minibatch() {
        return Err(Error::Unsupported("minibatch_gradient"));
    }
    let q0 = cfg.initial_q.clone().unwrap_or_else(|| vec![0.0; n]);
    if q0.len() != n {
        return Err(Error::Dimension(format!("initial state of length {} for dimension {n}", q0.len())));
    }
    let mut noise = rng.derive(0);
    let mut forces = if cfg.minibatch { ForceSource::minibatch(rng.derive(1)) } else { ForceSource::exact() };
    let m = fs.len();
    let mut values: Vec<Vec<f64>> = (0..m).map(|_| Vec::with_capacity(cfg.steps + 1)).collect();
    let mut fv = vec![0.0; m];
    let mut record = |q: &[f64], values: &mut Vec<Vec<f64>>| {
        fs.eval_into(q, &mut fv);
        for (col, v) in values.iter_mut().zip(&fv) {
            col.push(*v);
        }
    };
    match dynamics {
        Dynamics::Underdamped(gamma) => {
            if gamma.dim() != n {
                return Err(Error::Dimension(format!("friction is {0}x{0}, target dimension {n}", gamma.dim())));
            }
            let ou = OuFactors::new(gamma, cfg.dt, 0)?;
            let mut s = PhaseState::new(target, &mut forces, q0, vec![0.0; n])?;
            record(&s.q, &mut values);
            for _ in 0..cfg.steps {
                baoab_step(&mut s, target, &mut forces, &ou, &mut noise)?;
                record(&s.q, &mut values);
            }
            Ok(SamplePath { values, final_q: s.q, final_p: Some(s.p) })
        }
        Dynamics::Overdamped | Dynamics::Irreversible(_) => {
            if !(cfg.dt > 0.0) {
                return Err(Error::Config(format!("time step must be positive, got {}", cfg.dt)));
            }
            let mut q = q0;
            record(&q, &mut values);
            for i in 0..cfg.steps {
                let step = i as u64 + 1;
                match dynamics {
                    Dynamics::Irreversible(j) => {
                        irreversible_overdamped_step(&mut q, target, &mut forces, j, cfg.dt, &mut noise, step)?
                    }
                    _ => overdamped_step(&mut q, target, &mut forces, cfg.dt, &mut noise, step)?,
                }
                record(&q, &mut values);
            }
            Ok(SamplePath { values, final_q: q, final_p: None })
        }
    }
}
