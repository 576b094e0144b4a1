//! Turning the target and observable sections into core objects.

use std::path::Path;

use serde_json::{json, Value};

use frictuner_core::analytic::{asymptotic_variance_quadratic, polynomial_variance_1d, GaussianCase};
use frictuner_core::linalg::{FrictionMatrix, SymMatrix};
use frictuner_core::observables::{Observable, ObservableSet};
use frictuner_core::rng::RngStream;
use frictuner_core::targets::{
    synthetic_logistic_data, BridgeTarget, DoubleWellTarget, GaussianTarget, LogisticScale, LogisticTarget, Target,
};

use crate::config::{ExperimentConfig, ObservableKind, ObservableSection, TargetKind, TargetSection};
use crate::data::load_logistic_csv;
use crate::error::{HarnessError, Result};

pub struct Problem {
    pub target: Box<dyn Target>,
    pub observables: ObservableSet,
    pub names: Vec<String>,
    /// Precision of a Gaussian target.
    pub precision: Option<SymMatrix>,
    pub minibatch: bool,
    /// Summary of the target recorded in the manifest.
    pub info: Value,
}

impl Problem {
    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// Closed-form variance of each observable at `gamma`, when known:
    /// quadratic/linear observables on a Gaussian with commuting matrices,
    /// or any polynomial on a 1D Gaussian.
    pub fn analytic_variances(&self, gamma: &SymMatrix) -> Option<Vec<f64>> {
        let precision = self.precision.as_ref()?;
        let n = precision.dim();
        let sigma = precision.map_spectrum(|l| 1.0 / l).ok()?;
        let friction = FrictionMatrix::new(gamma.clone(), 1e-300).ok()?;
        self.observables
            .members()
            .iter()
            .map(|f| {
                let (u0, l) = match f {
                    Observable::Polynomial1d(c) if n == 1 => {
                        return polynomial_variance_1d(c, precision.get(0, 0), gamma.get(0, 0)).ok();
                    }
                    Observable::NormSquared => (SymMatrix::identity(n), vec![0.0; n]),
                    Observable::Coordinate(i) => {
                        let mut l = vec![0.0; n];
                        l[*i] = 1.0;
                        (SymMatrix::zeros(n), l)
                    }
                    Observable::Linear(l) => (SymMatrix::zeros(n), l.clone()),
                    Observable::Quadratic { u0, l } => (u0.clone(), l.clone()),
                    _ => return None,
                };
                let case = GaussianCase::new(sigma.clone(), u0, l, friction.clone()).ok()?;
                asymptotic_variance_quadratic(&case).ok()
            })
            .collect()
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

fn logistic_scale(t: &TargetSection) -> LogisticScale {
    match t.scale {
        Some(c) => LogisticScale::Fixed(c),
        None => LogisticScale::Auto,
    }
}

fn finish_logistic(t: &TargetSection, target: LogisticTarget, mut info: Value) -> Result<(Box<dyn Target>, Value)> {
    info["scale_c"] = json!(target.scale());
    info["auto_scale"] = json!(target.auto_scale());
    let target = if t.minibatch > 0 { target.with_minibatch(t.minibatch)? } else { target };
    info["minibatch"] = json!(t.minibatch);
    info["scale_c_used"] = json!(target.scale());
    Ok((Box::new(target), info))
}

fn build_target(t: &TargetSection, base: &Path) -> Result<(Box<dyn Target>, Option<SymMatrix>, Value)> {
    match t.kind {
        TargetKind::Gaussian => {
            let prec = match &t.precision {
                Some(p) => SymMatrix::from_row_slice(t.dim, p)?,
                None => SymMatrix::scaled_identity(t.dim, t.v0),
            };
            let g = GaussianTarget::new(prec.clone())?;
            Ok((Box::new(g), Some(prec.clone()), json!({"kind": "gaussian", "dim": t.dim, "precision": prec.to_row_major()})))
        }
        TargetKind::Bridge => {
            let delta = t.delta.unwrap_or(1.0 / (t.dim as f64 + 1.0));
            let b = BridgeTarget::new(t.dim, delta)?;
            let prec = b.gaussian().precision().clone();
            Ok((Box::new(b), Some(prec), json!({"kind": "bridge", "dim": t.dim, "delta": delta})))
        }
        TargetKind::DoubleWell => {
            Ok((Box::new(DoubleWellTarget::new(t.dim)), None, json!({"kind": "double-well", "dim": t.dim})))
        }
        TargetKind::LogisticSynthetic => {
            let mut rng = RngStream::new(t.data_seed, 0);
            let (x, y) = synthetic_logistic_data(t.dim, t.points, &mut rng);
            let target = LogisticTarget::new(x, y, logistic_scale(t), None)?;
            let info = json!({"kind": "logistic-synthetic", "dim": t.dim, "points": t.points, "data_seed": t.data_seed});
            let (b, info) = finish_logistic(t, target, info)?;
            Ok((b, None, info))
        }
        TargetKind::LogisticCsv => {
            let path = t.path.as_ref().ok_or_else(|| bad("logistic-csv needs target.path"))?;
            let full = if path.is_absolute() { path.clone() } else { base.join(path) };
            let data = load_logistic_csv(&full, t.label_column.as_deref())?;
            let info = json!({
                "kind": "logistic-csv",
                "path": full.display().to_string(),
                "dim": data.columns.len(),
                "points": data.labels.len(),
                "columns": data.columns,
                "dropped_rows": data.dropped_rows,
                "dropped_columns": data.dropped_columns,
            });
            let target = LogisticTarget::new(data.features, data.labels, logistic_scale(t), None)?;
            let (b, info) = finish_logistic(t, target, info)?;
            Ok((b, None, info))
        }
    }
}

fn build_observables(o: &ObservableSection, n: usize) -> Result<(ObservableSet, Vec<String>)> {
    let (set, names) = match o.kind {
        ObservableKind::Coordinate => (ObservableSet::single(Observable::Coordinate(o.index)), vec![format!("q{}", o.index)]),
        ObservableKind::Coordinates => (ObservableSet::coordinates(n), (0..n).map(|i| format!("q{i}")).collect()),
        ObservableKind::Linear => (ObservableSet::single(Observable::Linear(o.weights.clone())), vec!["linear".into()]),
        ObservableKind::NormSquared => (ObservableSet::single(Observable::NormSquared), vec!["half_norm_sq".into()]),
        ObservableKind::Polynomial => {
            if o.coeffs.is_empty() {
                return Err(bad("polynomial observable needs coeffs"));
            }
            (ObservableSet::single(Observable::Polynomial1d(o.coeffs.clone())), vec!["polynomial".into()])
        }
    };
    set.validate(n)?;
    Ok((set, names))
}

pub fn build_problem(cfg: &ExperimentConfig, base: &Path) -> Result<Problem> {
    let (target, precision, info) = build_target(&cfg.target, base)?;
    let (observables, names) = build_observables(&cfg.observable, target.dim())?;
    Ok(Problem { target, observables, names, precision, minibatch: cfg.target.minibatch > 0, info })
}
