//! Experiment configuration: a sectioned TOML document whose keys are all
//! known in advance. Presets produce a full document; a config file and
//! command-line flags are layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use frictuner_core::friction_opt::{ConstraintMode, OnUnconverged, OptConfig, StepSchedule, UpdateRule};
use frictuner_core::integrators::{ClosingKick, TangentOptions};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Optimize,
    Sample,
    Galerkin,
    Benchmark,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Optimize => "optimize",
            Mode::Sample => "sample",
            Mode::Galerkin => "galerkin",
            Mode::Benchmark => "benchmark",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub preset: Option<String>,
    pub mode: Mode,
    pub seed: u64,
    pub out: PathBuf,
    /// Independent replicas of the whole run.
    pub chains: usize,
    /// Friction used by sample/benchmark/galerkin and as the optimiser's start.
    pub gamma: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { preset: None, mode: Mode::Optimize, seed: 7, out: PathBuf::from("out"), chains: 1, gamma: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Gaussian,
    Bridge,
    DoubleWell,
    LogisticSynthetic,
    LogisticCsv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetSection {
    pub kind: TargetKind,
    /// State dimension (features for the logistic targets).
    pub dim: usize,
    /// Isotropic Gaussian precision.
    pub v0: f64,
    /// Full Gaussian precision, row-major; overrides `v0`.
    pub precision: Option<Vec<f64>>,
    /// Bridge grid size; defaults to `1/(dim+1)`.
    pub delta: Option<f64>,
    /// Number of synthetic logistic data points.
    pub points: usize,
    pub data_seed: u64,
    pub path: Option<PathBuf>,
    /// Label column of the CSV; defaults to the last one.
    pub label_column: Option<String>,
    /// Minibatch size, 0 for full gradients.
    pub minibatch: usize,
    /// Logistic scale `c`; automatic when absent.
    pub scale: Option<f64>,
}

impl Default for TargetSection {
    fn default() -> Self {
        TargetSection {
            kind: TargetKind::Gaussian,
            dim: 1,
            v0: 1.0,
            precision: None,
            delta: None,
            points: 500,
            data_seed: 2024,
            path: None,
            label_column: None,
            minibatch: 0,
            scale: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableKind {
    Coordinate,
    Coordinates,
    Linear,
    NormSquared,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObservableSection {
    pub kind: ObservableKind,
    pub index: usize,
    /// Linear weights.
    pub weights: Vec<f64>,
    /// 1D polynomial coefficients, lowest degree first.
    pub coeffs: Vec<f64>,
}

impl Default for ObservableSection {
    fn default() -> Self {
        ObservableSection { kind: ObservableKind::NormSquared, index: 0, weights: Vec::new(), coeffs: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Constraint {
    Full,
    Diagonal,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    GradientDescent,
    HeavyBall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unconverged {
    Extend,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    InvSqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kick {
    Updated,
    Lagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub dt: f64,
    pub block_len: usize,
    pub burn_in: usize,
    pub blocks_per_proposal: usize,
    pub proposals_per_update: usize,
    pub replicas: usize,
    pub d_conv: f64,
    pub step_size: f64,
    pub anneal: f64,
    pub floor: f64,
    pub constraint: Constraint,
    pub update_rule: Rule,
    pub on_unconverged: Unconverged,
    pub schedule: Schedule,
    pub hessian_free: bool,
    pub closing_kick: Kick,
    pub epochs: usize,
    pub initial_q: Option<Vec<f64>>,
    /// Fraction of the trajectory averaged for the reported tail friction.
    pub tail_fraction: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptConfig::default();
        OptimizerSection {
            dt: d.dt,
            block_len: d.block_len,
            burn_in: d.burn_in,
            blocks_per_proposal: d.blocks_per_proposal,
            proposals_per_update: d.proposals_per_update,
            replicas: d.replicas,
            d_conv: d.d_conv,
            step_size: d.step_size,
            anneal: d.anneal,
            floor: d.floor,
            constraint: Constraint::Full,
            update_rule: Rule::HeavyBall,
            on_unconverged: Unconverged::Extend,
            schedule: Schedule::Constant,
            hessian_free: false,
            closing_kick: Kick::Updated,
            epochs: d.epochs,
            initial_q: None,
            tail_fraction: 0.2,
        }
    }
}

impl OptimizerSection {
    pub fn to_opt_config(&self, minibatch: bool) -> OptConfig {
        OptConfig {
            dt: self.dt,
            block_len: self.block_len,
            burn_in: self.burn_in,
            blocks_per_proposal: self.blocks_per_proposal,
            proposals_per_update: self.proposals_per_update,
            replicas: self.replicas,
            d_conv: self.d_conv,
            step_size: self.step_size,
            anneal: self.anneal,
            floor: self.floor,
            mode: match self.constraint {
                Constraint::Full => ConstraintMode::Full,
                Constraint::Diagonal => ConstraintMode::Diagonal,
                Constraint::Scalar => ConstraintMode::Scalar,
            },
            update_rule: match self.update_rule {
                Rule::GradientDescent => UpdateRule::GradientDescent,
                Rule::HeavyBall => UpdateRule::HeavyBall,
            },
            on_unconverged: match self.on_unconverged {
                Unconverged::Extend => OnUnconverged::Extend,
                Unconverged::Discard => OnUnconverged::Discard,
            },
            schedule: match self.schedule {
                Schedule::Constant => StepSchedule::Constant,
                Schedule::InvSqrt => StepSchedule::InvSqrt,
            },
            tangent: TangentOptions {
                hessian_free: self.hessian_free,
                closing: match self.closing_kick {
                    Kick::Updated => ClosingKick::Updated,
                    Kick::Lagged => ClosingKick::Lagged,
                },
            },
            epochs: self.epochs,
            initial_gamma: None,
            initial_q: self.initial_q.clone(),
            minibatch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DynamicsKind {
    Underdamped,
    Overdamped,
    Irreversible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub dt: f64,
    pub burn_in: usize,
    pub block_len: usize,
    pub n_blocks: usize,
    pub dynamics: DynamicsKind,
    /// Write every observable value to `samples.csv` (sample mode).
    pub trace: bool,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            dt: 0.1,
            burn_in: 100,
            block_len: 300,
            n_blocks: 99,
            dynamics: DynamicsKind::Underdamped,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GalerkinSection {
    pub degree: usize,
    pub quadrature_tol: f64,
    /// Also write the generator matrix and solution coefficients.
    pub dump: bool,
    /// Also compute the variance gradient (one extra solve per entry).
    pub gradient: bool,
}

impl Default for GalerkinSection {
    fn default() -> Self {
        GalerkinSection { degree: 8, quadrature_tol: 1e-11, dump: false, gradient: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub target: TargetSection,
    pub observable: ObservableSection,
    pub optimizer: OptimizerSection,
    pub sampler: SamplerSection,
    pub galerkin: GalerkinSection,
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| bad(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| bad(e.to_string()))
    }

    /// Builds the configuration from a file: the named preset (if any) with
    /// the file's keys layered over it.
    pub fn load(path: &Path, preset_override: Option<&str>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::layered(&text, preset_override)
    }

    /// `text` layered over the preset named by `preset_override`, else by
    /// its own `run.preset`, else over the defaults.
    pub fn layered(text: &str, preset_override: Option<&str>) -> Result<Self> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        let named = preset_override.map(str::to_owned).or_else(|| {
            file.get("run").and_then(|r| r.get("preset")).and_then(|p| p.as_str()).map(str::to_owned)
        });
        let base = match &named {
            Some(name) => crate::presets::preset(name)?,
            None => ExperimentConfig::default(),
        };
        let mut merged: toml::Table =
            toml::Table::try_from(&base).map_err(|e| bad(format!("cannot serialise base config: {e}")))?;
        merge(&mut merged, file);
        let mut cfg: ExperimentConfig = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| bad(e.to_string()))?;
        if let Some(name) = named {
            cfg.run.preset = Some(name);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.chains == 0 {
            return Err(bad("chains must be at least 1"));
        }
        let t = &self.target;
        if t.dim == 0 {
            return Err(bad("target dimension must be positive"));
        }
        if !(t.v0 > 0.0) {
            return Err(bad(format!("v0 must be positive, got {}", t.v0)));
        }
        if let Some(p) = &t.precision {
            if p.len() != t.dim * t.dim {
                return Err(bad(format!("precision has {} entries, expected {}", p.len(), t.dim * t.dim)));
            }
        }
        if let Some(d) = t.delta {
            if !(d > 0.0) {
                return Err(bad(format!("bridge delta must be positive, got {d}")));
            }
        }
        if t.kind == TargetKind::LogisticCsv && t.path.is_none() {
            return Err(bad("logistic-csv needs target.path"));
        }
        if t.kind == TargetKind::LogisticSynthetic && t.points == 0 {
            return Err(bad("logistic-synthetic needs at least one data point"));
        }
        if t.minibatch > 0 && !matches!(t.kind, TargetKind::LogisticCsv | TargetKind::LogisticSynthetic) {
            return Err(bad("minibatch gradients are only available for the logistic targets"));
        }
        let o = &self.optimizer;
        if !(o.tail_fraction > 0.0 && o.tail_fraction <= 1.0) {
            return Err(bad(format!("tail_fraction must be in (0, 1], got {}", o.tail_fraction)));
        }
        let s = &self.sampler;
        if !(s.dt > 0.0) || s.block_len == 0 || s.n_blocks == 0 {
            return Err(bad("sampler needs dt > 0, block_len > 0 and n_blocks > 0"));
        }
        if !(self.galerkin.quadrature_tol > 0.0) {
            return Err(bad("galerkin quadrature_tol must be positive"));
        }
        Ok(())
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(ExperimentConfig::layered("[run]\nsed = 3\n", None), Err(HarnessError::Config(_))));
        assert!(matches!(ExperimentConfig::layered("[extra]\nx = 1\n", None), Err(HarnessError::Config(_))));
        assert!(ExperimentConfig::layered("[optimizer]\nstep = 1.0\n", None).is_err());
    }

    #[test]
    fn file_layers_over_preset() {
        let c = ExperimentConfig::layered("[run]\npreset = \"quad1d\"\n[optimizer]\nepochs = 10\n", None).unwrap();
        assert_eq!(c.optimizer.epochs, 10);
        assert_eq!(c.target.v0, 5.0);
        assert_eq!(c.run.preset.as_deref(), Some("quad1d"));
        let d = ExperimentConfig::layered("[run]\npreset = \"quad1d\"\n", Some("lin1d")).unwrap();
        assert_eq!(d.run.preset.as_deref(), Some("lin1d"));
    }

    #[test]
    fn enum_spelling() {
        let c = ExperimentConfig::layered("[optimizer]\nconstraint = \"diagonal\"\nupdate_rule = \"gradient-descent\"\n", None)
            .unwrap();
        assert_eq!(c.optimizer.constraint, Constraint::Diagonal);
        assert!(ExperimentConfig::layered("[optimizer]\nconstraint = \"banded\"\n", None).is_err());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::default();
        c.validate().unwrap();
        c.run.chains = 0;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.target.minibatch = 5;
        assert!(c.validate().is_err());
    }
}
