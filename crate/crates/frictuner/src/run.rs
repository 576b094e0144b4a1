//! Executing a configuration and writing its artifacts.

use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Value};

use frictuner_core::friction_opt::{run_optimizer, OptimizerRun};
use frictuner_core::galerkin::{self, QuadratureOptions};
use frictuner_core::integrators::Antisymmetric;
use frictuner_core::linalg::{FrictionMatrix, SymMatrix};
use frictuner_core::rng::RngStream;
use frictuner_core::sampler::{run_path, Dynamics, PathConfig, SamplePath};
use frictuner_core::variance::{block_variance, BlockEstimate};
use frictuner_core::Error as CoreError;

use crate::config::{DynamicsKind, ExperimentConfig, Mode};
use crate::error::{HarnessError, Result};
use crate::gamma::GammaSpec;
use crate::problem::{build_problem, Problem};
use crate::report::{ensure_dir, VERSION, write_json, write_versioned_text, Cell, Table};

pub const THREADS_ENV: &str = "FRICTUNER_THREADS";

pub const GAMMA_FILE: &str = "gamma_trajectory.csv";
pub const VARIANCE_FILE: &str = "variance_table.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Where relative paths resolve and what to record as the invocation.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub base_dir: PathBuf,
    pub argv: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub diverged: bool,
    pub gamma_table: Table,
    pub variance_table: Table,
    pub diagnostics: Value,
}

impl RunOutcome {
    /// Value of the `variance` column for `(method, observable)`.
    pub fn variance(&self, method: &str, observable: &str) -> Option<f64> {
        self.variance_table.rows.iter().find_map(|r| match (&r[0], &r[1], &r[2]) {
            (Cell::Text(m), Cell::Text(o), Cell::Num(v)) if m == method && o == observable => Some(*v),
            _ => None,
        })
    }
}

/// Thread cap from the environment, defaulting to the machine's parallelism.
pub fn thread_cap() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(HarnessError::Config(format!("{THREADS_ENV} must be a positive integer, got `{s}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn variance_header() -> Table {
    Table::new(["method", "observable", "variance", "stderr", "chains"])
}

fn gamma_header(n: usize) -> Table {
    let mut h = vec!["chain".to_owned(), "epoch".to_owned()];
    for i in 0..n {
        for j in 0..n {
            h.push(format!("g_{i}_{j}"));
        }
    }
    Table::new(h)
}

fn gamma_row(chain: usize, epoch: u64, g: &SymMatrix) -> Vec<Cell> {
    let mut r = vec![Cell::from(chain), Cell::from(epoch)];
    r.extend(g.to_row_major().into_iter().map(Cell::from));
    r
}

/// Mean and standard error across chains; a single chain keeps its own error.
fn aggregate(values: &[(f64, f64)]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().map(|v| v.0).sum::<f64>() / m;
    if values.len() == 1 {
        return (mean, values[0].1);
    }
    let var = values.iter().map(|v| (v.0 - mean) * (v.0 - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / m;
    let se = if xs.len() > 1 { (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0) / m).sqrt() } else { f64::NAN };
    (mean, se)
}

fn run_chains<T: Send>(chains: usize, threads: usize, job: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    if chains == 1 || threads == 1 {
        return Ok((0..chains).map(job).collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Numeric(format!("cannot start worker threads: {e}")))?;
    Ok(pool.install(|| (0..chains).into_par_iter().map(job).collect()))
}

/// Runs `cfg` and writes all artifacts into `cfg.run.out`.
pub fn run(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<RunOutcome> {
    let started = Instant::now();
    cfg.validate()?;
    let problem = build_problem(cfg, &ctx.base_dir)?;
    let n = problem.dim();
    let gamma_spec = cfg.run.gamma.as_deref().map(GammaSpec::parse).transpose()?;
    let gamma = match &gamma_spec {
        Some(s) => Some(s.resolve(n, problem.precision.as_ref(), &ctx.base_dir)?),
        None => None,
    };
    let out_dir = if cfg.run.out.is_absolute() { cfg.run.out.clone() } else { ctx.base_dir.join(&cfg.run.out) };
    let threads = thread_cap()?.min(cfg.run.chains);
    let body = match cfg.run.mode {
        Mode::Optimize => optimize(cfg, &problem, gamma.as_ref(), threads)?,
        Mode::Sample | Mode::Benchmark => sample(cfg, &problem, gamma.as_ref(), threads)?,
        Mode::Galerkin => galerkin_mode(cfg, &problem, gamma.as_ref())?,
    };
    ensure_dir(&out_dir)?;
    body.gamma_table.write(&out_dir.join(GAMMA_FILE))?;
    body.variance_table.write(&out_dir.join(VARIANCE_FILE))?;
    for (name, table) in &body.extra_tables {
        table.write(&out_dir.join(name))?;
    }
    for (name, text) in &body.extra_text {
        write_versioned_text(&out_dir.join(name), text)?;
    }
    let diagnostics = json!({
        "mode": cfg.run.mode.name(),
        "diverged": body.diverged,
        "wall_time_s": started.elapsed().as_secs_f64(),
        "threads": threads,
        "l_star_total": body.l_star_total,
        "chains": body.chain_diagnostics,
        "details": body.details,
    });
    write_json(&out_dir.join(DIAGNOSTICS_FILE), &diagnostics)?;
    let manifest = json!({
        "version": VERSION,
        "seed": cfg.run.seed,
        "mode": cfg.run.mode.name(),
        "preset": cfg.run.preset,
        "chains": cfg.run.chains,
        "threads": threads,
        "gamma_spec": cfg.run.gamma,
        "gamma": gamma.as_ref().map(|g| g.to_row_major()),
        "target": problem.info,
        "observables": problem.names,
        "config": cfg,
        "argv": ctx.argv,
    });
    write_json(&out_dir.join(MANIFEST_FILE), &manifest)?;
    Ok(RunOutcome {
        out_dir,
        diverged: body.diverged,
        gamma_table: body.gamma_table,
        variance_table: body.variance_table,
        diagnostics,
    })
}

struct ModeOutput {
    gamma_table: Table,
    variance_table: Table,
    extra_tables: Vec<(String, Table)>,
    extra_text: Vec<(String, String)>,
    chain_diagnostics: Vec<Value>,
    details: Value,
    l_star_total: u64,
    diverged: bool,
}

fn optimize(cfg: &ExperimentConfig, problem: &Problem, gamma: Option<&SymMatrix>, threads: usize) -> Result<ModeOutput> {
    let n = problem.dim();
    let mut opt = cfg.optimizer.to_opt_config(problem.minibatch);
    opt.initial_gamma = gamma.cloned();
    opt.validate(n)?;
    let frac = cfg.optimizer.tail_fraction;
    let runs: Vec<std::result::Result<OptimizerRun, CoreError>> = run_chains(cfg.run.chains, threads, |c| {
        run_optimizer(problem.target.as_ref(), &problem.observables, &opt, &RngStream::new(cfg.run.seed, c as u64))
    })?;
    let runs = runs.into_iter().collect::<std::result::Result<Vec<_>, _>>()?;
    let mut gamma_table = gamma_header(n);
    let mut proxies = Vec::new();
    let mut tails = Vec::new();
    let mut chain_diagnostics = Vec::new();
    let mut diverged = false;
    let mut l_star_total = 0;
    for (c, r) in runs.iter().enumerate() {
        for p in &r.trajectory {
            gamma_table.push(gamma_row(c, p.epoch, &p.gamma));
        }
        let skip = ((1.0 - frac) * r.blocks.len() as f64).floor() as usize;
        let tail_proxy: Vec<f64> = r.blocks[skip..].iter().map(|b| b.proxy).collect();
        proxies.push(mean_stderr(&tail_proxy));
        let tail = r.tail_mean(frac);
        tails.push(tail.trace() / n as f64);
        diverged |= r.divergence.is_some();
        l_star_total += r.unconverged_checks;
        chain_diagnostics.push(json!({
            "chain": c,
            "l_star": r.unconverged_checks,
            "updates": r.updates,
            "converged_blocks": r.blocks.len(),
            "epochs_run": r.epochs_run,
            "divergence": r.divergence.as_ref().map(|e| e.to_string()),
            "final_gamma": r.final_gamma.mat().to_row_major(),
            "tail_mean_gamma": tail.to_row_major(),
            "tail_range": [r.tail_range(frac).0, r.tail_range(frac).1],
        }));
    }
    let mut variance_table = variance_header();
    let usable: Vec<(f64, f64)> = proxies.iter().copied().filter(|p| p.0.is_finite()).collect();
    if !usable.is_empty() {
        let (m, se) = aggregate(&usable);
        variance_table.push(vec!["zeta_proxy_tail".into(), "weighted_sum".into(), m.into(), se.into(), usable.len().into()]);
    }
    let tail_pairs: Vec<(f64, f64)> = tails.iter().map(|&t| (t, f64::NAN)).collect();
    let (tail_mean, _) = aggregate(&tail_pairs);
    Ok(ModeOutput {
        gamma_table,
        variance_table,
        extra_tables: Vec::new(),
        extra_text: Vec::new(),
        chain_diagnostics,
        details: json!({ "tail_fraction": frac, "tail_mean_trace_over_n": tail_mean }),
        l_star_total,
        diverged,
    })
}

fn dynamics_for(cfg: &ExperimentConfig, gamma: &SymMatrix, n: usize) -> Result<Dynamics> {
    Ok(match cfg.sampler.dynamics {
        DynamicsKind::Underdamped => Dynamics::Underdamped(FrictionMatrix::new(gamma.clone(), f64::MIN_POSITIVE)?),
        DynamicsKind::Overdamped => Dynamics::Overdamped,
        DynamicsKind::Irreversible => Dynamics::Irreversible(Antisymmetric::cyclic(n)),
    })
}

fn sample(cfg: &ExperimentConfig, problem: &Problem, gamma: Option<&SymMatrix>, threads: usize) -> Result<ModeOutput> {
    let n = problem.dim();
    let gamma = gamma.cloned().unwrap_or_else(|| SymMatrix::identity(n));
    let s = &cfg.sampler;
    let dynamics = dynamics_for(cfg, &gamma, n)?;
    let path_cfg = PathConfig {
        dt: s.dt,
        steps: s.burn_in + s.n_blocks * s.block_len,
        minibatch: problem.minibatch,
        initial_q: cfg.optimizer.initial_q.clone(),
    };
    let results: Vec<std::result::Result<(SamplePath, BlockEstimate), CoreError>> =
        run_chains(cfg.run.chains, threads, |c| {
            let path = run_path(
                problem.target.as_ref(),
                &problem.observables,
                &dynamics,
                &path_cfg,
                &RngStream::new(cfg.run.seed, c as u64),
            )?;
            let series: Vec<&[f64]> = path.values.iter().map(Vec::as_slice).collect();
            let est = block_variance(&series, s.burn_in, s.block_len, s.n_blocks, s.dt)?;
            Ok((path, est))
        })?;
    let mut gamma_table = gamma_header(n);
    let mut chain_diagnostics = Vec::new();
    let mut estimates = Vec::new();
    let mut diverged = false;
    let mut trace = Table::default();
    for (c, r) in results.into_iter().enumerate() {
        gamma_table.push(gamma_row(c, 0, &gamma));
        match r {
            Ok((path, est)) => {
                chain_diagnostics.push(json!({
                    "chain": c,
                    "divergence": Value::Null,
                    "spread_over_observables": est.spread,
                    "final_q": path.final_q,
                }));
                if cfg.run.mode == Mode::Sample && s.trace {
                    if trace.header.is_empty() {
                        let mut h = vec!["chain".to_owned(), "step".to_owned()];
                        h.extend(problem.names.iter().cloned());
                        trace = Table::new(h);
                    }
                    for i in 0..path.values[0].len() {
                        let mut row = vec![Cell::from(c), Cell::from(i)];
                        row.extend(path.values.iter().map(|v| Cell::from(v[i])));
                        trace.push(row);
                    }
                }
                estimates.push(est);
            }
            Err(e @ CoreError::Divergence { .. }) => {
                diverged = true;
                chain_diagnostics.push(json!({ "chain": c, "divergence": e.to_string() }));
            }
            Err(e) => return Err(e.into()),
        }
    }
    let mut variance_table = variance_header();
    if !estimates.is_empty() {
        let k = estimates.len();
        for (m, name) in problem.names.iter().enumerate() {
            let vals: Vec<(f64, f64)> = estimates.iter().map(|e| (e.per_observable[m], e.stderr[m])).collect();
            let (v, se) = aggregate(&vals);
            variance_table.push(vec!["block".into(), name.clone().into(), v.into(), se.into(), k.into()]);
        }
        if problem.names.len() > 1 {
            let m = problem.names.len() as f64;
            let vals: Vec<(f64, f64)> = estimates
                .iter()
                .map(|e| (e.mean, (e.stderr.iter().map(|s| s * s).sum::<f64>()).sqrt() / m))
                .collect();
            let (v, se) = aggregate(&vals);
            variance_table.push(vec!["block".into(), "mean".into(), v.into(), se.into(), k.into()]);
        }
    }
    let mut details = json!({
        "dt": s.dt,
        "burn_in": s.burn_in,
        "block_len": s.block_len,
        "n_blocks": s.n_blocks,
        "dynamics": format!("{:?}", s.dynamics).to_lowercase(),
    });
    if cfg.run.mode == Mode::Benchmark {
        add_references(cfg, problem, &gamma, &mut variance_table, &mut details);
    }
    let mut extra_tables = Vec::new();
    if !trace.header.is_empty() {
        extra_tables.push(("samples.csv".to_owned(), trace));
    }
    Ok(ModeOutput {
        gamma_table,
        variance_table,
        extra_tables,
        extra_text: Vec::new(),
        chain_diagnostics,
        details,
        l_star_total: 0,
        diverged,
    })
}

fn push_reference(table: &mut Table, method: &str, names: &[String], vals: &[f64]) {
    for (name, v) in names.iter().zip(vals) {
        table.push(vec![method.into(), name.clone().into(), (*v).into(), 0.0.into(), 0usize.into()]);
    }
    if names.len() > 1 {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        table.push(vec![method.into(), "mean".into(), mean.into(), 0.0.into(), 0usize.into()]);
    }
}

/// Adds closed-form and spectral reference rows when they are available.
fn add_references(cfg: &ExperimentConfig, problem: &Problem, gamma: &SymMatrix, table: &mut Table, details: &mut Value) {
    if cfg.sampler.dynamics != DynamicsKind::Underdamped {
        return;
    }
    if let Some(v) = problem.analytic_variances(gamma) {
        push_reference(table, "analytic", &problem.names, &v);
    }
    if problem.dim() <= galerkin::MAX_DIM {
        match galerkin_variances(cfg, problem, gamma) {
            Ok(g) => push_reference(table, "galerkin", &problem.names, &g.variances),
            Err(e) => details["galerkin_skipped"] = json!(e.to_string()),
        }
    }
}

struct GalerkinResult {
    variances: Vec<f64>,
    residuals: Vec<f64>,
    gradient_rows: Vec<Vec<Cell>>,
    dumps: Vec<(String, String)>,
    unknowns: usize,
}

fn galerkin_variances(cfg: &ExperimentConfig, problem: &Problem, gamma: &SymMatrix) -> Result<GalerkinResult> {
    let g = &cfg.galerkin;
    let opts = QuadratureOptions { tol: g.quadrature_tol, ..Default::default() };
    let basis = galerkin::build_basis(problem.target.as_ref(), g.degree, &opts)?;
    let gen = galerkin::assemble(&basis, gamma)?;
    let n = problem.dim();
    let mut out = GalerkinResult {
        variances: Vec::new(),
        residuals: Vec::new(),
        gradient_rows: Vec::new(),
        dumps: Vec::new(),
        unknowns: basis.len(),
    };
    if g.dump {
        let mut s = String::new();
        gen.write_csv(&mut s).expect("write to String");
        out.dumps.push(("generator.csv".into(), s));
    }
    for (f, name) in problem.observables.members().iter().zip(&problem.names) {
        let sol = galerkin::solve(&gen, &basis, f)?;
        out.variances.push(galerkin::variance(&gen, &sol));
        out.residuals.push(sol.residual);
        if g.gradient {
            let dg = galerkin::delta_gamma(&basis, &sol);
            let grad = galerkin::variance_gradient(&basis, gamma, f)?;
            for i in 0..n {
                for j in i..n {
                    out.gradient_rows.push(vec![
                        name.clone().into(),
                        i.into(),
                        j.into(),
                        dg.get(i, j).into(),
                        grad.get(i, j).into(),
                    ]);
                }
            }
        }
        if g.dump {
            let mut s = String::new();
            sol.write_csv(&basis, &mut s).expect("write to String");
            out.dumps.push((format!("coefficients_{name}.csv"), s));
        }
    }
    Ok(out)
}

fn galerkin_mode(cfg: &ExperimentConfig, problem: &Problem, gamma: Option<&SymMatrix>) -> Result<ModeOutput> {
    let n = problem.dim();
    let gamma = gamma.cloned().unwrap_or_else(|| SymMatrix::identity(n));
    let res = galerkin_variances(cfg, problem, &gamma)?;
    let mut gamma_table = gamma_header(n);
    gamma_table.push(gamma_row(0, 0, &gamma));
    let mut variance_table = variance_header();
    push_reference(&mut variance_table, "galerkin", &problem.names, &res.variances);
    let weighted: f64 = res.variances.iter().zip(problem.observables.weights()).map(|(v, w)| v * w).sum();
    if problem.names.len() > 1 {
        variance_table.push(vec!["galerkin".into(), "weighted_sum".into(), weighted.into(), 0.0.into(), 0usize.into()]);
    }
    if let Some(v) = problem.analytic_variances(&gamma) {
        push_reference(&mut variance_table, "analytic", &problem.names, &v);
    }
    let mut extra_tables = Vec::new();
    if !res.gradient_rows.is_empty() {
        let mut t = Table::new(["observable", "i", "j", "delta_gamma", "variance_gradient"]);
        for r in res.gradient_rows {
            t.push(r);
        }
        extra_tables.push(("galerkin_gradient.csv".to_owned(), t));
    }
    Ok(ModeOutput {
        gamma_table,
        variance_table,
        extra_tables,
        extra_text: res.dumps,
        chain_diagnostics: Vec::new(),
        details: json!({
            "degree": cfg.galerkin.degree,
            "unknowns": res.unknowns,
            "residuals": res.residuals,
        }),
        l_star_total: 0,
        diverged: false,
    })
}
