//! Dispatch of configured runs.

use std::path::Path;

use divopt::analysis::{extract_boundaries, Boundaries, BoundaryWarning};
use divopt::closed_form::{deterministic_mu_star, solve_auxiliary, waiting_value, x_b};
use divopt::extensions::{solve_credit_line, solve_fixed_issuance, solve_proportional_issuance};
use divopt::grid::Grid;
use divopt::mc::{simulate_policy, McEstimate, SimConfig};
use divopt::model::{validate_assumptions, Interval, ModelParams, ValidationReport};
use divopt::solver::{
    check_invariants, default_eps_constant, k_continuation, policy_iteration_with, InvariantCheck, InvariantTolerances, PolicyField,
    SolveReport, ValueField,
};
use serde::Serialize;

use crate::config::{DeterministicSection, McSection, Mode, RunConfig};
use crate::output::{boundaries_csv, csv_table, json, value_csv, Artifacts};
use crate::{CliError, Status};

#[derive(Debug, Clone, Serialize)]
struct Report<'a> {
    mode: Mode,
    #[serde(skip_serializing_if = "Option::is_none")]
    penalty: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solve: Option<&'a SolveReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    issuance_threshold: Option<f64>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    warnings: &'a [BoundaryWarning],
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    invariants: &'a [InvariantCheck],
    #[serde(skip_serializing_if = "Option::is_none")]
    v00: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truncated: Option<bool>,
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    monte_carlo: &'a [McRow],
}

impl<'a> Report<'a> {
    fn new(mode: Mode) -> Self {
        Self {
            mode,
            penalty: None,
            solve: None,
            mu_star: None,
            issuance_threshold: None,
            warnings: &[],
            invariants: &[],
            v00: None,
            truncated: None,
            monte_carlo: &[],
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McRow {
    pub x: f64,
    pub mu: f64,
    pub grid_value: f64,
    pub estimate: McEstimate,
}

/// A grid solve and what was derived from it.
#[derive(Debug, Clone)]
pub struct Solved {
    pub grid: Grid,
    pub model: ModelParams,
    pub k: f64,
    pub value: ValueField,
    pub policy: PolicyField,
    pub boundaries: Boundaries,
    pub report: SolveReport,
    pub invariants: Vec<InvariantCheck>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub status: Status,
    pub artifacts: Artifacts,
    pub solved: Option<Solved>,
}

fn status_of(report: &SolveReport) -> Status {
    if report.converged() {
        Status::Converged
    } else {
        Status::MaxIter
    }
}

/// Solves the base or an extension problem on the configured grid.
pub fn solve_grid(cfg: &RunConfig) -> Result<Solved, CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid(&model)?;
    let k = cfg.penalty(&grid)?;
    let s = &cfg.solver;
    let (value, policy, mut boundaries, report) = match cfg.mode {
        Mode::ProportionalIssuance | Mode::FixedIssuance => {
            let spec = cfg.issuance.as_ref().ok_or_else(|| CliError::config("issuance", "missing section"))?;
            let f = if cfg.mode == Mode::FixedIssuance { solve_fixed_issuance } else { solve_proportional_issuance };
            let sol = f(&model, &grid, spec, k, s.tau, s.max_iter)?;
            (sol.value, sol.policy, Some(sol.boundaries), sol.report)
        }
        Mode::CreditLine => {
            let spec = cfg.credit_line.as_ref().ok_or_else(|| CliError::config("credit_line", "missing section"))?;
            let sol = solve_credit_line(&model, &grid, spec, k, s.tau, s.max_iter)?;
            (sol.value, sol.policy, Some(sol.boundaries), sol.report)
        }
        _ => match &s.k_schedule {
            Some(schedule) => {
                let last = k_continuation(&model, &grid, schedule, s.tau, s.max_iter)?.pop().expect("schedule is nonempty");
                (last.value, last.policy, None, last.report)
            }
            None => {
                let (v, p, r) = policy_iteration_with(&model, &grid, k, s.tau, s.max_iter, &PolicyField::zeros(grid.len()), s.linear)?;
                (v, p, None, r)
            }
        },
    };
    let k = match (&s.k_schedule, cfg.mode) {
        (Some(schedule), Mode::Base | Mode::Mc) => *schedule.last().expect("schedule is nonempty"),
        _ => k,
    };
    let boundaries = match boundaries.take() {
        Some(b) => b,
        None => extract_boundaries(&policy, &grid, k).expect("policy matches grid"),
    };
    let invariants = if matches!(cfg.mode, Mode::Base | Mode::Mc) {
        let aux = solve_auxiliary(&model, grid.mus(), None)?;
        let c = s.eps_constant.unwrap_or_else(|| default_eps_constant(&model, &grid));
        check_invariants(&grid, &value, Some(&aux.values), InvariantTolerances { tol: 1e-8 + s.tau, eps_k: c / k })
    } else {
        Vec::new()
    };
    Ok(Solved { grid, model, k, value, policy, boundaries, report, invariants })
}

/// Bilinear interpolation of a node field.
pub fn interpolate(grid: &Grid, v: &ValueField, x: f64, mu: f64) -> f64 {
    let locate = |pts: &[f64], p: f64| {
        let n = pts.len();
        let h = (pts[n - 1] - pts[0]) / (n - 1) as f64;
        let s = ((p - pts[0]) / h).clamp(0.0, (n - 1) as f64);
        let i = (s.floor() as usize).min(n - 2);
        (i, s - i as f64)
    };
    let (i, tx) = locate(grid.xs(), x);
    let (j, tm) = locate(grid.mus(), mu);
    let at = |a, b| v.at(grid, a, b);
    let lo = at(i, j) + tx * (at(i + 1, j) - at(i, j));
    let hi = at(i, j + 1) + tx * (at(i + 1, j + 1) - at(i, j + 1));
    lo + tm * (hi - lo)
}

pub fn monte_carlo(solved: &Solved, mc: &McSection) -> Result<Vec<McRow>, CliError> {
    let cfg = SimConfig {
        n_paths: mc.n_paths,
        dt: mc.dt,
        t_horizon: mc.t_horizon.unwrap_or_else(|| SimConfig::default_horizon(solved.model.r)),
        seed: mc.seed,
        antithetic: mc.antithetic,
    };
    mc.points
        .iter()
        .map(|&[x, mu]| {
            let estimate = simulate_policy(&solved.model, &solved.boundaries, (x, mu), &cfg)?;
            Ok(McRow { x, mu, grid_value: interpolate(&solved.grid, &solved.value, x, mu), estimate })
        })
        .collect()
}

fn deterministic(cfg: &RunConfig) -> Result<RunResult, CliError> {
    let p = cfg.deterministic_params()?;
    let d = cfg.deterministic.clone().unwrap_or_default();
    let DeterministicSection { mu_min, mu_max, n } = d;
    if n < 2 {
        return Err(CliError::config("deterministic.n", format!("must be >= 2, got {n}")));
    }
    if !(mu_min < mu_max && mu_max <= 0.0) {
        return Err(CliError::config("deterministic.mu_max", format!("need mu_min < mu_max <= 0, got [{mu_min}, {mu_max}]")));
    }
    let rows = (0..n).map(|s| {
        let mu = mu_min + (mu_max - mu_min) * s as f64 / (n - 1) as f64;
        [mu.to_string(), x_b(&p, mu).to_string(), waiting_value(&p, mu).to_string()]
    });
    let mut report = Report::new(Mode::Deterministic);
    report.mu_star = Some(deterministic_mu_star(&p)?);
    report.v00 = Some(p.v00());
    let mut artifacts = Artifacts::default();
    artifacts.add("deterministic.csv", csv_table(["mu", "xB", "waitingValue"], rows));
    artifacts.add("report.json", json(&report));
    Ok(RunResult { status: Status::Converged, artifacts, solved: None })
}

fn auxiliary(cfg: &RunConfig) -> Result<RunResult, CliError> {
    let model = cfg.model()?;
    let spec = cfg.grid_spec(&model);
    let a = cfg.auxiliary.clone().unwrap_or_default();
    let (lo, hi, n) = (a.mu_min.unwrap_or(spec.mu_min), a.mu_max.unwrap_or(spec.mu_max), a.nmu.unwrap_or(spec.nmu));
    if n < 3 || !(lo < hi) {
        return Err(CliError::config("auxiliary", format!("need mu_min < mu_max and nmu >= 3, got [{lo}, {hi}] with {n} nodes")));
    }
    let mus: Vec<f64> = (0..n).map(|j| lo + (hi - lo) * j as f64 / (n - 1) as f64).collect();
    let sol = solve_auxiliary(&model, &mus, a.k)?;
    let mut report = Report::new(Mode::Auxiliary);
    report.solve = Some(&sol.report);
    report.mu_star = sol.mu_star;
    report.truncated = Some(sol.truncated);
    let mut artifacts = Artifacts::default();
    artifacts.add("auxiliary.csv", csv_table(["mu", "Va"], mus.iter().zip(&sol.values).map(|(m, v)| [m.to_string(), v.to_string()])));
    artifacts.add("report.json", json(&report));
    Ok(RunResult { status: status_of(&sol.report), artifacts, solved: None })
}

/// Computes every artifact of a run without touching the disk.
pub fn execute(cfg: &RunConfig) -> Result<RunResult, CliError> {
    let mut result = match cfg.mode {
        Mode::Deterministic => deterministic(cfg)?,
        Mode::Auxiliary => auxiliary(cfg)?,
        _ => {
            let solved = solve_grid(cfg)?;
            let mc_rows = match cfg.mode {
                Mode::Mc => monte_carlo(&solved, &cfg.mc.clone().unwrap_or_default())?,
                _ => Vec::new(),
            };
            let mut report = Report::new(cfg.mode);
            report.penalty = Some(solved.k);
            report.solve = Some(&solved.report);
            report.mu_star = solved.boundaries.mu_star;
            report.issuance_threshold = solved.boundaries.issuance_threshold;
            report.warnings = &solved.boundaries.warnings;
            report.invariants = &solved.invariants;
            report.monte_carlo = &mc_rows;
            let mut artifacts = Artifacts::default();
            artifacts.add("boundaries.csv", boundaries_csv(&solved.boundaries));
            artifacts.add("value.csv", value_csv(&solved.grid, &solved.value, &solved.policy));
            if !mc_rows.is_empty() {
                let rows = mc_rows.iter().map(|r| {
                    let e = &r.estimate;
                    [r.x, r.mu, r.grid_value, e.mean, e.std_error].map(|v| v.to_string())
                });
                artifacts.add("mc.csv", csv_table(["x", "mu", "gridValue", "mcMean", "mcStdError"], rows));
            }
            artifacts.add("report.json", json(&report));
            let status = status_of(&solved.report);
            RunResult { status, artifacts, solved: Some(solved) }
        }
    };
    result.artifacts.add("config.toml", cfg.to_toml());
    Ok(result)
}

pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunResult, CliError> {
    let result = execute(cfg)?;
    result.artifacts.write_to(out)?;
    Ok(result)
}

/// Runs the configured grid problem once per parameter value on a common
/// grid. Failures are logged and recorded in `summary.csv`; the remaining
/// values still run.
pub fn sweep(cfg: &RunConfig, parameter: &str, values: &[f64], out: &Path) -> Result<Status, CliError> {
    if values.is_empty() {
        return Err(CliError::config("sweep.values", "must not be empty"));
    }
    if matches!(cfg.mode, Mode::Deterministic | Mode::Auxiliary | Mode::Mc) {
        return Err(CliError::config("mode", "sweeps run the base or an extension problem"));
    }
    cfg.with_parameter(parameter, values[0])?;
    let model = cfg.model()?;
    let spec = cfg.grid_spec(&model);
    let mut base = cfg.clone();
    base.grid.x_min = Some(spec.x_min);
    base.grid.x_max = Some(spec.x_max);
    base.grid.mu_min = Some(spec.mu_min);
    base.grid.mu_max = Some(spec.mu_max);
    base.grid.nx = Some(spec.nx);
    base.grid.nmu = Some(spec.nmu);
    base.sweep = None;

    let mut status = Status::Converged;
    let mut rows = Vec::with_capacity(values.len());
    for &value in values {
        let name = format!("{parameter}={value}");
        let outcome = base.with_parameter(parameter, value).and_then(|c| run(&c, &out.join(&name)).map(|r| (c, r)));
        let row = match outcome {
            Ok((c, r)) => {
                status = status.merge(r.status);
                let s = r.solved.as_ref().expect("grid modes produce a solve");
                let barrier = s.boundaries.upper_at(c.drift.mu_bar);
                let halt = if r.status == Status::Converged { "converged" } else { "max_iter" };
                [value.to_string(), halt.into(), s.report.iterations.to_string(), opt(s.boundaries.mu_star), opt(barrier), String::new()]
            }
            Err(e) => {
                log::error!("{name}: {e}");
                status = Status::Failed;
                [value.to_string(), "error".into(), String::new(), String::new(), String::new(), e.to_string()]
            }
        };
        rows.push(row);
    }
    let mut summary = Artifacts::default();
    summary.add("summary.csv", csv_table(["value", "status", "iterations", "muStar", "barrierAtMuBar", "error"], rows));
    summary.write_to(out)?;
    Ok(status)
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Checks the model assumptions on the configured profitability range and
/// that the grid can be built.
pub fn validate(cfg: &RunConfig) -> Result<(Status, ValidationReport), CliError> {
    let model = cfg.model()?;
    let grid = cfg.grid(&model)?;
    cfg.penalty(&grid)?;
    let report = validate_assumptions(&model, Interval::new(grid.spec.mu_min, grid.spec.mu_max), 201);
    let status = if report.passed() { Status::Converged } else { Status::Failed };
    Ok((status, report))
}
