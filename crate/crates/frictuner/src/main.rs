use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use frictuner::config::{Constraint, ExperimentConfig, Mode};
use frictuner::presets::{preset, PRESETS};
use frictuner::{run, HarnessError, RunContext};

#[derive(Parser, Debug)]
#[command(name = "frictuner", version = frictuner::report::VERSION, about = "Tune the friction matrix of underdamped Langevin samplers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the friction optimiser and record the friction trajectory.
    Optimize(RunArgs),
    /// Sample at a fixed friction and estimate asymptotic variances by block averaging.
    Sample(RunArgs),
    /// Solve the Poisson equation in a Hermite basis for the variance and its gradient.
    Galerkin(RunArgs),
    /// Block-averaged variance at a fixed friction next to any available references.
    Benchmark(RunArgs),
    /// List the registered presets.
    PresetList,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Diagonal,
    Scalar,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[arg(long)]
    preset: Option<String>,
    /// TOML file with [run], [target], [observable], [optimizer], [sampler] and [galerkin] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optimiser steps; for sample/benchmark, total steps including burn-in.
    #[arg(long)]
    epochs: Option<usize>,
    /// A number, diag:v1,...,vn, a CSV file, or sigma-inv-half.
    #[arg(long)]
    gamma: Option<String>,
    /// Friction constraint used by the optimiser.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    chains: Option<usize>,
}

fn build_config(mode: Mode, a: &RunArgs) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match (&a.config, &a.preset) {
        (Some(path), p) => ExperimentConfig::load(path, p.as_deref())?,
        (None, Some(p)) => preset(p)?,
        (None, None) => ExperimentConfig::default(),
    };
    cfg.run.mode = mode;
    if let Some(s) = a.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.run.out = o.clone();
    }
    if let Some(g) = &a.gamma {
        cfg.run.gamma = Some(g.clone());
    }
    if let Some(c) = a.chains {
        cfg.run.chains = c;
    }
    if let Some(m) = a.mode {
        cfg.optimizer.constraint = match m {
            ModeArg::Full => Constraint::Full,
            ModeArg::Diagonal => Constraint::Diagonal,
            ModeArg::Scalar => Constraint::Scalar,
        };
    }
    if let Some(e) = a.epochs {
        cfg.optimizer.epochs = e;
        let s = &mut cfg.sampler;
        if e <= s.burn_in + s.block_len {
            return Err(HarnessError::Config(format!(
                "--epochs {e} leaves no full block after {} burn-in steps",
                s.burn_in
            )));
        }
        s.n_blocks = (e - s.burn_in) / s.block_len;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mode, args) = match &cli.command {
        Command::PresetList => {
            for (name, about) in PRESETS {
                println!("{name:<20} {about}");
            }
            return ExitCode::SUCCESS;
        }
        Command::Optimize(a) => (Mode::Optimize, a),
        Command::Sample(a) => (Mode::Sample, a),
        Command::Galerkin(a) => (Mode::Galerkin, a),
        Command::Benchmark(a) => (Mode::Benchmark, a),
    };
    let base_dir = std::env::current_dir().unwrap_or_else(|_| PathBuf::from("."));
    let ctx = RunContext { base_dir, argv: std::env::args().collect() };
    let result = build_config(mode, args).and_then(|cfg| run(&cfg, &ctx));
    match result {
        Ok(outcome) => {
            for row in &outcome.variance_table.rows {
                let cells: Vec<String> = row
                    .iter()
                    .map(|c| match c {
                        frictuner::report::Cell::Num(v) => format!("{v:.6}"),
                        frictuner::report::Cell::Int(i) => i.to_string(),
                        frictuner::report::Cell::Text(t) => t.clone(),
                    })
                    .collect();
                println!("{}", cells.join("  "));
            }
            println!("artifacts in {}", outcome.out_dir.display());
            if outcome.diverged {
                eprintln!("error: run diverged; partial artifacts kept");
                return ExitCode::from(3);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
