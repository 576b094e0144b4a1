//! Named experiment configurations.

use crate::config::*;
use crate::error::{HarnessError, Result};

/// Registry order, as printed by `preset-list`.
pub const PRESETS: &[(&str, &str)] = &[
    ("quad1d", "1D Gaussian V0=5, f=q^2/2, heavy-ball updates; optimum sqrt(5)"),
    ("lin1d", "1D Gaussian V0=5, f=q; friction driven to the floor"),
    ("quartic1d", "standard 1D Gaussian, f=q^4, averaged gradient steps from 2.5"),
    ("bridge", "discretised Brownian bridge, n=20, f=|q|^2/2, diagonal friction"),
    ("logistic-synthetic", "Bayesian logistic regression on synthetic data, n=20, p=500, f_i=beta_i"),
    ("logistic-csv", "Bayesian logistic regression on a CSV file (set target.path)"),
    ("doublewell", "1D tilted double well, f=q; tangents blow up across transitions"),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

fn one_dim_gaussian(v0: f64, observable: ObservableSection) -> ExperimentConfig {
    ExperimentConfig {
        target: TargetSection { kind: TargetKind::Gaussian, dim: 1, v0, ..Default::default() },
        observable,
        optimizer: OptimizerSection {
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
            update_rule: Rule::HeavyBall,
            epochs: 50_000,
            ..Default::default()
        },
        sampler: SamplerSection { dt: 0.08, burn_in: 100, block_len: 300, n_blocks: 999, ..Default::default() },
        ..Default::default()
    }
}

fn polynomial(coeffs: &[f64]) -> ObservableSection {
    ObservableSection { kind: ObservableKind::Polynomial, coeffs: coeffs.to_vec(), ..Default::default() }
}

fn coordinate(index: usize) -> ObservableSection {
    ObservableSection { kind: ObservableKind::Coordinate, index, ..Default::default() }
}

fn logistic(kind: TargetKind) -> ExperimentConfig {
    ExperimentConfig {
        target: TargetSection { kind, dim: 20, points: 500, ..Default::default() },
        observable: ObservableSection { kind: ObservableKind::Coordinates, ..Default::default() },
        optimizer: OptimizerSection {
            dt: 0.1,
            block_len: 100,
            burn_in: 100,
            blocks_per_proposal: 1,
            proposals_per_update: 1,
            replicas: 1,
            d_conv: 0.01,
            step_size: 0.1,
            anneal: 1.0,
            floor: 0.2,
            constraint: Constraint::Full,
            update_rule: Rule::HeavyBall,
            epochs: 30_000,
            ..Default::default()
        },
        sampler: SamplerSection { dt: 0.1, burn_in: 100, block_len: 300, n_blocks: 99, ..Default::default() },
        ..Default::default()
    }
}

/// The configuration registered under `name`.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let mut cfg = match name {
        "quad1d" => one_dim_gaussian(5.0, polynomial(&[0.0, 0.0, 0.5])),
        "lin1d" => one_dim_gaussian(5.0, coordinate(0)),
        "quartic1d" => {
            let mut c = one_dim_gaussian(1.0, polynomial(&[0.0, 0.0, 0.0, 0.0, 1.0]));
            c.optimizer = OptimizerSection {
                dt: 0.1,
                block_len: 100,
                burn_in: 100,
                blocks_per_proposal: 1,
                proposals_per_update: 4,
                replicas: 4,
                d_conv: 1e-2,
                step_size: 5e-4,
                anneal: 1.0,
                floor: 0.2,
                update_rule: Rule::GradientDescent,
                epochs: 4_000_000,
                ..Default::default()
            };
            c.run.gamma = Some("2.5".into());
            c.sampler.dt = 0.1;
            c.galerkin.degree = 12;
            c
        }
        "bridge" => ExperimentConfig {
            target: TargetSection { kind: TargetKind::Bridge, dim: 20, delta: Some(1.0 / 21.0), ..Default::default() },
            observable: ObservableSection { kind: ObservableKind::NormSquared, ..Default::default() },
            optimizer: OptimizerSection {
                dt: 0.1,
                block_len: 60,
                burn_in: 100,
                blocks_per_proposal: 5,
                proposals_per_update: 5,
                replicas: 1,
                d_conv: 0.01,
                step_size: 0.2,
                anneal: 1.0,
                floor: 0.2,
                constraint: Constraint::Diagonal,
                update_rule: Rule::HeavyBall,
                epochs: 300_000,
                ..Default::default()
            },
            sampler: SamplerSection { dt: 0.1, burn_in: 100, block_len: 300, n_blocks: 999, ..Default::default() },
            ..Default::default()
        },
        "logistic-synthetic" => logistic(TargetKind::LogisticSynthetic),
        "logistic-csv" => logistic(TargetKind::LogisticCsv),
        "doublewell" => {
            let mut c = one_dim_gaussian(1.0, coordinate(0));
            c.target = TargetSection { kind: TargetKind::DoubleWell, dim: 1, ..Default::default() };
            c.galerkin.degree = 12;
            c
        }
        other => {
            return Err(HarnessError::Config(format!(
                "unknown preset `{other}`; available: {}",
                preset_names().join(", ")
            )))
        }
    };
    cfg.run.preset = Some(name.to_owned());
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_registered_preset_builds() {
        for name in preset_names() {
            let c = preset(name).unwrap();
            assert_eq!(c.run.preset.as_deref(), Some(name));
            if name != "logistic-csv" {
                c.validate().unwrap();
            }
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        match preset("quad2d") {
            Err(HarnessError::Config(m)) => assert!(m.contains("quad1d") && m.contains("doublewell")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn quad1d_parameters() {
        let c = preset("quad1d").unwrap();
        assert_eq!(c.target.v0, 5.0);
        let o = &c.optimizer;
        assert_eq!((o.dt, o.block_len, o.d_conv, o.floor, o.step_size, o.anneal), (0.08, 125, 2e-4, 0.2, 1.0, 0.5));
        assert_eq!(o.update_rule, Rule::HeavyBall);
    }

    #[test]
    fn bridge_parameters() {
        let c = preset("bridge").unwrap();
        assert_eq!((c.target.dim, c.target.delta), (20, Some(1.0 / 21.0)));
        let o = &c.optimizer;
        assert_eq!((o.block_len, o.blocks_per_proposal, o.proposals_per_update, o.replicas), (60, 5, 5, 1));
        assert_eq!((o.step_size, o.anneal, o.floor, o.constraint), (0.2, 1.0, 0.2, Constraint::Diagonal));
    }
}
