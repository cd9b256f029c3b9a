//! Policy iteration for the penalized dividend problem.
//!
//! The engine is generic over a [`Scheme`]: something that can assemble the
//! linear system for a fixed control and improve a control given a value
//! iterate. The base dividend problem, the 1-D auxiliary stopping problem
//! and the issuance/credit-line extensions all run through it.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::Grid;
use crate::linsolve::{LinearSolveError, LinearSolver, LinearSolverKind};
use crate::model::ModelParams;
use crate::operator::{self, DiscreteOperator, Generator, OperatorError, RowKind};

/// Improvement switches only when the endpoint residuals differ by more
/// than this; smaller gaps keep the incumbent control.
pub(crate) const SWITCH_THRESHOLD: f64 = 1e-9;

pub const DEFAULT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Operator(#[from] OperatorError),
    #[error(transparent)]
    Linear(#[from] LinearSolveError),
    #[error("invalid argument `{field}`: {reason}")]
    InvalidArgument { field: &'static str, reason: String },
    #[error("non-finite value at node {node} in iteration {iteration}")]
    NonFinite { node: usize, iteration: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyField {
    rates: Vec<f64>,
}

impl PolicyField {
    pub fn zeros(n: usize) -> Self {
        Self { rates: vec![0.0; n] }
    }

    pub fn from_rates(rates: Vec<f64>) -> Self {
        Self { rates }
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn rates_mut(&mut self) -> &mut [f64] {
        &mut self.rates
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueField {
    values: Vec<f64>,
}

impl ValueField {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, grid: &Grid, i: usize, j: usize) -> f64 {
        self.values[grid.index(i, j)]
    }

    pub fn sup_distance(&self, other: &ValueField) -> f64 {
        sup_diff(&self.values, &other.values)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum HaltReason {
    Tolerance,
    PolicyFixed,
    MaxIter,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `sup |V_i - V_{i-1}|` per iteration, the first entry measured from zero.
    pub residual_history: Vec<f64>,
    pub halt_reason: HaltReason,
    pub wall_time: f64,
    pub max_backward_error: f64,
    pub fallback_solves: usize,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.halt_reason != HaltReason::MaxIter
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Penalization; `None` picks `100 / dx`.
    pub k: Option<f64>,
    pub tau: f64,
    pub max_iter: usize,
    pub linear: LinearSolverKind,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { k: None, tau: 0.0, max_iter: DEFAULT_MAX_ITER, linear: LinearSolverKind::Direct }
    }
}

impl SolverOptions {
    pub fn penalty(&self, grid: &Grid) -> f64 {
        self.k.unwrap_or_else(|| default_penalty(grid))
    }
}

pub fn default_penalty(grid: &Grid) -> f64 {
    100.0 / grid.dx()
}

/// Tolerance constant `C` in `eps_K = C / K`: bounds the gradient and
/// liquidation-value deficits of the penalized solution.
pub fn default_eps_constant(model: &ModelParams, grid: &Grid) -> f64 {
    let x_max = grid.spec.x_max;
    let mu_abs = grid.spec.mu_min.abs().max(grid.spec.mu_max.abs());
    2.0 * x_max.max(1.0) * (model.r * x_max + mu_abs)
}

pub(crate) trait Scheme: Sync {
    type Control: Clone + PartialEq + Send;
    fn assemble(&self, control: &Self::Control) -> DiscreteOperator;
    fn improve(&self, v: &[f64], incumbent: &Self::Control) -> Self::Control;
}

pub(crate) struct PiOutcome<C> {
    pub values: Vec<f64>,
    pub control: C,
    pub report: SolveReport,
}

pub(crate) fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub(crate) fn run_policy_iteration<S: Scheme>(
    scheme: &S,
    initial: S::Control,
    tau: f64,
    max_iter: usize,
    linear: LinearSolverKind,
) -> Result<PiOutcome<S::Control>, SolverError> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(SolverError::InvalidArgument { field: "tau", reason: format!("must be finite and >= 0, got {tau}") });
    }
    if max_iter == 0 {
        return Err(SolverError::InvalidArgument { field: "max_iter", reason: "must be at least 1".into() });
    }
    let start = Instant::now();
    let mut lin = LinearSolver::new(linear);
    let mut control = initial;
    let mut values: Option<Vec<f64>> = None;
    let mut history = Vec::new();
    let mut max_be = 0.0f64;
    let mut fallback = 0;
    let mut halt = HaltReason::MaxIter;

    for it in 0..max_iter {
        let op = scheme.assemble(&control);
        let (v, stats) = lin.solve(&op, values.as_deref())?;
        if let Some(node) = v.iter().position(|x| !x.is_finite()) {
            return Err(SolverError::NonFinite { node, iteration: it + 1 });
        }
        max_be = max_be.max(stats.backward_error);
        fallback += usize::from(stats.used_fallback);
        let change = match &values {
            Some(prev) => sup_diff(&v, prev),
            None => v.iter().fold(0.0f64, |m, x| m.max(x.abs())),
        };
        history.push(change);
        log::info!("iteration {:>3}: sup|dV| = {change:.3e}, backward error {:.1e}", it + 1, stats.backward_error);
        let had_prev = values.is_some();
        values = Some(v);
        if had_prev && change <= tau {
            halt = HaltReason::Tolerance;
            break;
        }
        let next = scheme.improve(values.as_deref().expect("value iterate"), &control);
        if next == control {
            halt = HaltReason::PolicyFixed;
            break;
        }
        if it + 1 < max_iter {
            control = next;
        }
    }
    if halt == HaltReason::MaxIter {
        log::warn!("policy iteration stopped after {max_iter} iterations without convergence");
    }
    let report = SolveReport {
        iterations: history.len(),
        residual_history: history,
        halt_reason: halt,
        wall_time: start.elapsed().as_secs_f64(),
        max_backward_error: max_be,
        fallback_solves: fallback,
    };
    Ok(PiOutcome { values: values.expect("at least one iteration"), control, report })
}

/// The penalized dividend problem on a (possibly credit-line) generator.
pub(crate) struct DividendScheme<'a> {
    pub gen: &'a Generator,
    pub k: f64,
    /// Nodes where a dividend rate may be chosen.
    pub allowed: Vec<bool>,
}

impl<'a> DividendScheme<'a> {
    pub fn new(gen: &'a Generator, k: f64, allow_negative_cash: impl Fn(usize) -> bool) -> Self {
        let allowed = (0..gen.len()).map(|n| gen.kinds[n] == RowKind::Pde && allow_negative_cash(n)).collect();
        Self { gen, k, allowed }
    }

    /// Clears controls on nodes where they have no effect.
    pub fn sanitize(&self, rates: &mut [f64]) {
        for (l, ok) in rates.iter_mut().zip(&self.allowed) {
            if !ok {
                *l = 0.0;
            }
        }
    }

    /// Reporting convention for rows that carry no control: ruin nodes are
    /// liquidation, the highest ruin node and the reflecting edge copy their
    /// interior neighbour.
    pub fn report_policy(&self, rates: &[f64]) -> PolicyField {
        let (nx, nmu) = (self.gen.nx, self.gen.nmu);
        let mut out = rates.to_vec();
        for j in 0..nmu {
            let base = j * nx;
            let b = self.gen.bottom[j];
            for i in 0..b {
                out[base + i] = self.k;
            }
            if b + 1 < nx {
                out[base + b] = out[base + b + 1];
            }
            out[base + nx - 1] = out[base + nx - 2];
        }
        PolicyField::from_rates(out)
    }
}

impl Scheme for DividendScheme<'_> {
    type Control = Vec<f64>;

    fn assemble(&self, control: &Vec<f64>) -> DiscreteOperator {
        operator::assemble_dividend(self.gen, control)
    }

    fn improve(&self, v: &[f64], incumbent: &Vec<f64>) -> Vec<f64> {
        let dx = self.gen.dx;
        let k = self.k;
        (0..v.len())
            .into_par_iter()
            .map(|n| {
                if !self.allowed[n] {
                    return 0.0;
                }
                // residual slope in l is D^-V - 1; pay where it is negative
                let slope = (v[n] - v[n - 1]) / dx - 1.0;
                if slope < -SWITCH_THRESHOLD {
                    k
                } else if slope > SWITCH_THRESHOLD {
                    0.0
                } else {
                    incumbent[n]
                }
            })
            .collect()
    }
}

fn validate_policy(grid: &Grid, policy: &PolicyField, k: f64) -> Result<(), SolverError> {
    if !(k.is_finite() && k > 0.0) {
        return Err(OperatorError::InvalidPenalty(k).into());
    }
    if policy.len() != grid.len() {
        return Err(OperatorError::ShapeMismatch { expected: grid.len(), got: policy.len() }.into());
    }
    if let Some((node, &value)) = policy.rates().iter().enumerate().find(|(_, l)| !(0.0..=k).contains(*l)) {
        return Err(OperatorError::ControlOutOfRange { node, value, k }.into());
    }
    Ok(())
}

pub fn policy_iteration(
    model: &ModelParams,
    grid: &Grid,
    k: f64,
    tau: f64,
    max_iter: usize,
    initial_policy: &PolicyField,
) -> Result<(ValueField, PolicyField, SolveReport), SolverError> {
    policy_iteration_with(model, grid, k, tau, max_iter, initial_policy, LinearSolverKind::Direct)
}

pub fn policy_iteration_with(
    model: &ModelParams,
    grid: &Grid,
    k: f64,
    tau: f64,
    max_iter: usize,
    initial_policy: &PolicyField,
    linear: LinearSolverKind,
) -> Result<(ValueField, PolicyField, SolveReport), SolverError> {
    validate_policy(grid, initial_policy, k)?;
    let gen = Generator::new(model, grid, None)?;
    let scheme = DividendScheme::new(&gen, k, |_| true);
    let mut init = initial_policy.rates().to_vec();
    scheme.sanitize(&mut init);
    let out = run_policy_iteration(&scheme, init, tau, max_iter, linear)?;
    Ok((ValueField::new(out.values), scheme.report_policy(&out.control), out.report))
}

/// Convenience wrapper with [`SolverOptions`] and a zero initial policy.
pub fn solve(model: &ModelParams, grid: &Grid, opts: &SolverOptions) -> Result<(ValueField, PolicyField, SolveReport), SolverError> {
    let k = opts.penalty(grid);
    policy_iteration_with(model, grid, k, opts.tau, opts.max_iter, &PolicyField::zeros(grid.len()), opts.linear)
}

#[derive(Debug, Clone, Serialize)]
pub struct ContinuationStep {
    pub k: f64,
    pub value: ValueField,
    pub policy: PolicyField,
    pub report: SolveReport,
}

/// Solves along an increasing penalization schedule, seeding each run with
/// the previous policy rescaled to the new `K`.
pub fn k_continuation(
    model: &ModelParams,
    grid: &Grid,
    schedule: &[f64],
    tau: f64,
    max_iter: usize,
) -> Result<Vec<ContinuationStep>, SolverError> {
    if schedule.is_empty() {
        return Err(SolverError::InvalidArgument { field: "k_schedule", reason: "must not be empty".into() });
    }
    if schedule.windows(2).any(|w| w[1] <= w[0]) || schedule[0] <= 0.0 {
        return Err(SolverError::InvalidArgument { field: "k_schedule", reason: "must be positive and strictly increasing".into() });
    }
    let mut out: Vec<ContinuationStep> = Vec::with_capacity(schedule.len());
    for &k in schedule {
        let init = match out.last() {
            Some(prev) => PolicyField::from_rates(prev.policy.rates().iter().map(|&l| (l / prev.k * k).min(k)).collect()),
            None => PolicyField::zeros(grid.len()),
        };
        let (value, policy, report) = policy_iteration(model, grid, k, tau, max_iter, &init)?;
        out.push(ContinuationStep { k, value, policy, report });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantCheck {
    pub name: &'static str,
    pub passed: bool,
    /// Largest violation (0 when none).
    pub worst: f64,
    pub node: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct InvariantTolerances {
    /// Additive slack on the monotonicity and bound checks.
    pub tol: f64,
    pub eps_k: f64,
}

fn tally(name: &'static str, violations: impl Iterator<Item = (usize, f64)>) -> InvariantCheck {
    let mut worst = 0.0;
    let mut node = None;
    for (n, d) in violations {
        if d > worst {
            worst = d;
            node = Some(n);
        }
    }
    InvariantCheck { name, passed: node.is_none(), worst, node }
}

/// Node-wise checks of a converged value field. `v_a` holds the auxiliary
/// stopping value per profitability column, when available.
pub fn check_invariants(grid: &Grid, v: &ValueField, v_a: Option<&[f64]>, tols: InvariantTolerances) -> Vec<InvariantCheck> {
    let v = v.values();
    let (nx, nmu) = (grid.nx(), grid.nmu());
    let dx = grid.dx();
    let InvariantTolerances { tol, eps_k } = tols;
    let mut out = vec![
        tally("nonnegative", (0..v.len()).filter_map(|n| (v[n] < -tol).then_some((n, -v[n])))),
        tally("zero_at_ruin", (0..nmu).map(|j| grid.index(0, j)).filter_map(|n| (v[n] != 0.0).then_some((n, v[n].abs())))),
        tally(
            "nondecreasing_in_x",
            (0..nmu).flat_map(|j| (0..nx - 1).map(move |i| (j, i))).filter_map(|(j, i)| {
                let (a, b) = (grid.index(i, j), grid.index(i + 1, j));
                (v[b] < v[a] - tol).then_some((a, v[a] - v[b]))
            }),
        ),
        tally(
            "nondecreasing_in_mu",
            (0..nmu - 1).flat_map(|j| (0..nx).map(move |i| (j, i))).filter_map(|(j, i)| {
                let (a, b) = (grid.index(i, j), grid.index(i, j + 1));
                (v[b] < v[a] - tol).then_some((a, v[a] - v[b]))
            }),
        ),
        tally(
            "gradient_constraint",
            (0..nmu).flat_map(|j| (0..nx - 1).map(move |i| (j, i))).filter_map(|(j, i)| {
                let (a, b) = (grid.index(i, j), grid.index(i + 1, j));
                let slope = (v[b] - v[a]) / dx;
                (slope < 1.0 - eps_k - tol / dx).then_some((a, 1.0 - eps_k - slope))
            }),
        ),
        tally(
            "liquidation_lower_bound",
            (0..v.len()).filter_map(|n| {
                let x = grid.x(grid.coords(n).0);
                (v[n] < x - eps_k - tol).then_some((n, x - eps_k - v[n]))
            }),
        ),
    ];
    if let Some(va) = v_a {
        out.push(tally(
            "real_option_upper_bound",
            (0..v.len()).filter_map(|n| {
                let (i, j) = grid.coords(n);
                let cap = grid.x(i) + va[j] + tol;
                (v[n] > cap).then_some((n, v[n] - cap))
            }),
        ));
    }
    out
}
