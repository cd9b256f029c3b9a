//! Model variants: equity issuance with proportional or fixed-plus-proportional
//! costs, and a credit line that lets cash run negative down to a ruin curve.
//!
//! Issuance is modelled as an intensity-`K` transition to a higher cash node
//! that costs `(1 + lambda_p) * amount + lambda_f`. With proportional costs
//! only, the transition is to the neighbouring node at intensity `K / dx`,
//! which is the forward-differenced rate control `iota V_x`. At the ruin
//! node the choice between ruin and issuing is made exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{extract_boundaries, AnalysisError, Boundaries};
use crate::grid::Grid;
use crate::linsolve::LinearSolverKind;
use crate::model::ModelParams;
use crate::operator::{add_dividend, CashSetting, DiscreteOperator, Generator, RowBuilder, RowKind};
use crate::solver::{run_policy_iteration, DividendScheme, PolicyField, Scheme, SolveReport, SolverError, ValueField, SWITCH_THRESHOLD};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtensionError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error("invalid `{field}`: {reason}")]
    InvalidSpec { field: &'static str, reason: String },
    #[error("credit-line ruin level {level} at mu = {mu} lies outside the cash grid [{x_min}, 0]")]
    MaskOutsideGrid { mu: f64, level: f64, x_min: f64 },
}

/// A cost as a function of profitability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostCurve {
    Constant { value: f64 },
    /// `hi - (hi - lo) * logistic((mu - mid) / scale)`: `hi` for low
    /// profitability decaying to `lo` for high profitability.
    Logistic { hi: f64, lo: f64, mid: f64, scale: f64 },
}

impl CostCurve {
    pub fn constant(value: f64) -> Self {
        Self::Constant { value }
    }

    pub fn eval(&self, mu: f64) -> f64 {
        match *self {
            Self::Constant { value } => value,
            Self::Logistic { hi, lo, mid, scale } => hi - (hi - lo) / (1.0 + (-(mu - mid) / scale).exp()),
        }
    }

    fn validate(&self, field: &'static str) -> Result<(), ExtensionError> {
        let bad = |reason: String| Err(ExtensionError::InvalidSpec { field, reason });
        match *self {
            Self::Constant { value } if !(value >= 0.0) => bad(format!("must be >= 0, got {value}")),
            Self::Logistic { hi, lo, .. } if !(hi >= 0.0 && lo >= 0.0) => bad(format!("levels must be >= 0, got {hi}, {lo}")),
            Self::Logistic { scale, .. } if !(scale > 0.0 && scale.is_finite()) => bad(format!("scale must be > 0, got {scale}")),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IssuanceSpec {
    pub lambda_p: CostCurve,
    pub lambda_f: CostCurve,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl IssuanceSpec {
    pub fn proportional(lambda_p: CostCurve) -> Self {
        Self { lambda_p, lambda_f: CostCurve::constant(0.0), enabled: true }
    }

    pub fn fixed(lambda_p: CostCurve, lambda_f: CostCurve) -> Self {
        Self { lambda_p, lambda_f, enabled: true }
    }

    /// Decaying proportional costs: 34% for low profitability to 25% for high.
    pub fn decaying_proportional() -> Self {
        Self::proportional(CostCurve::Logistic { hi: 0.34, lo: 0.25, mid: -0.5, scale: 0.25 })
    }

    /// Decaying proportional costs plus fixed costs falling from 0.14 to 0.06.
    pub fn decaying_fixed() -> Self {
        Self::fixed(
            CostCurve::Logistic { hi: 0.34, lo: 0.25, mid: -0.5, scale: 0.25 },
            CostCurve::Logistic { hi: 0.14, lo: 0.06, mid: -0.5, scale: 0.25 },
        )
    }
}

/// Ruin curve of a credit line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LowerCurve {
    Constant(f64),
    /// `(mu, x_lower)` pairs, linearly interpolated and held flat outside.
    Table(Vec<(f64, f64)>),
}

impl LowerCurve {
    pub fn eval(&self, mu: f64) -> f64 {
        match self {
            Self::Constant(v) => *v,
            Self::Table(t) => {
                if mu <= t[0].0 {
                    return t[0].1;
                }
                let last = t[t.len() - 1];
                if mu >= last.0 {
                    return last.1;
                }
                let j = t.partition_point(|p| p.0 <= mu) - 1;
                let s = (mu - t[j].0) / (t[j + 1].0 - t[j].0);
                t[j].1 + s * (t[j + 1].1 - t[j].1)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreditLineSpec {
    pub rho_minus: f64,
    pub x_lower: LowerCurve,
}

/// Issuance decisions of a converged run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IssuanceField {
    /// Intervention intensity per node (0 where inactive).
    pub rates: Vec<f64>,
    /// Post-issuance cash level per node where active.
    pub targets: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtensionSolution {
    pub value: ValueField,
    pub policy: PolicyField,
    pub issuance: Option<IssuanceField>,
    pub boundaries: Boundaries,
    pub report: SolveReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Costs {
    Proportional,
    Fixed,
}

#[derive(Clone, PartialEq)]
struct IssueControl {
    div: Vec<f64>,
    target: Vec<Option<usize>>,
}

struct IssuanceScheme<'a> {
    div: DividendScheme<'a>,
    mode: Costs,
    xs: Vec<f64>,
    lp: Vec<f64>,
    lf: Vec<f64>,
}

impl IssuanceScheme<'_> {
    fn intensity(&self) -> f64 {
        match self.mode {
            Costs::Proportional => self.div.k / self.div.gen.dx,
            Costs::Fixed => self.div.k,
        }
    }

    fn cost(&self, j: usize, i: usize, m: usize) -> f64 {
        (1.0 + self.lp[j]) * (self.xs[m] - self.xs[i]) + self.lf[j]
    }

    /// Per column: best (gain, target) for every cash index, where the gain
    /// is measured against the node's own value (the ruin option at `i = 0`).
    fn column_choices(&self, v: &[f64], j: usize, incumbent: &[Option<usize>]) -> Vec<Option<usize>> {
        let nx = self.div.gen.nx;
        let base = j * nx;
        let c = 1.0 + self.lp[j];
        // suffix max of V_m - c x_m over m > i
        let mut suffix = vec![(f64::NEG_INFINITY, usize::MAX); nx + 1];
        for m in (0..nx).rev() {
            let val = v[base + m] - c * self.xs[m];
            suffix[m] = if val > suffix[m + 1].0 { (val, m) } else { suffix[m + 1] };
        }
        (0..nx)
            .map(|i| {
                let n = base + i;
                let kind = self.div.gen.kinds[n];
                let at_ruin = i == self.div.gen.bottom[j];
                if !(kind == RowKind::Pde || at_ruin) || i + 1 >= nx {
                    return None;
                }
                let own = if at_ruin { 0.0 } else { v[n] };
                let (best, m) = match self.mode {
                    Costs::Proportional => (v[n + 1] - self.cost(j, i, i + 1), i + 1),
                    Costs::Fixed => (suffix[i + 1].0 + c * self.xs[i] - self.lf[j], suffix[i + 1].1),
                };
                let gain = best - own;
                if let Some(m0) = incumbent[n] {
                    let g0 = v[base + m0] - self.cost(j, i, m0) - own;
                    if g0 >= gain - SWITCH_THRESHOLD && g0 >= -SWITCH_THRESHOLD {
                        return Some(m0);
                    }
                }
                if gain > SWITCH_THRESHOLD {
                    Some(m)
                } else if gain < -SWITCH_THRESHOLD {
                    None
                } else {
                    incumbent[n]
                }
            })
            .collect()
    }
}

impl Scheme for IssuanceScheme<'_> {
    type Control = IssueControl;

    fn assemble(&self, c: &IssueControl) -> DiscreteOperator {
        let gen = self.div.gen;
        let nx = gen.nx;
        let w = self.intensity();
        let mut b = RowBuilder::with_capacity(gen.len(), 11 * gen.len());
        for n in 0..gen.len() {
            let (i, j) = (n % nx, n / nx);
            match (gen.kinds[n], c.target[n]) {
                (RowKind::Ruin, Some(m)) => {
                    b.start(RowKind::Issue);
                    b.add(n, 1.0);
                    b.add(j * nx + m, -1.0);
                    b.add_rhs(-self.cost(j, i, m));
                }
                (RowKind::Pde, target) => {
                    gen.emit_row(&mut b, n);
                    add_dividend(&mut b, n, c.div[n], gen.dx);
                    if let Some(m) = target {
                        b.add(n, w);
                        b.add(j * nx + m, -w);
                        b.add_rhs(-w * self.cost(j, i, m));
                    }
                }
                _ => gen.emit_row(&mut b, n),
            }
            b.finish();
        }
        b.build()
    }

    fn improve(&self, v: &[f64], incumbent: &IssueControl) -> IssueControl {
        let div = self.div.improve(v, &incumbent.div);
        let target = (0..self.div.gen.nmu)
            .into_par_iter()
            .map(|j| self.column_choices(v, j, &incumbent.target))
            .collect::<Vec<_>>()
            .concat();
        IssueControl { div, target }
    }
}

fn check_penalty(k: f64) -> Result<(), ExtensionError> {
    if k.is_finite() && k > 0.0 {
        Ok(())
    } else {
        Err(ExtensionError::InvalidSpec { field: "solver.K", reason: format!("must be finite and > 0, got {k}") })
    }
}

fn base_solution(gen: &Generator, grid: &Grid, k: f64, tau: f64, max_iter: usize) -> Result<ExtensionSolution, ExtensionError> {
    let scheme = DividendScheme::new(gen, k, |_| true);
    let out = run_policy_iteration(&scheme, vec![0.0; gen.len()], tau, max_iter, LinearSolverKind::Direct)?;
    let policy = scheme.report_policy(&out.control);
    let boundaries = extract_boundaries(&policy, grid, k)?;
    Ok(ExtensionSolution { value: ValueField::new(out.values), policy, issuance: None, boundaries, report: out.report })
}

fn solve_issuance(
    model: &ModelParams,
    grid: &Grid,
    spec: &IssuanceSpec,
    mode: Costs,
    k: f64,
    tau: f64,
    max_iter: usize,
) -> Result<ExtensionSolution, ExtensionError> {
    check_penalty(k)?;
    spec.lambda_p.validate("issuance.lambda_p")?;
    spec.lambda_f.validate("issuance.lambda_f")?;
    if grid.spec.x_min != 0.0 {
        return Err(ExtensionError::InvalidSpec { field: "grid.x_min", reason: "issuance runs need a cash grid starting at 0".into() });
    }
    let gen = Generator::new(model, grid, None).map_err(SolverError::from)?;
    if !spec.enabled {
        return base_solution(&gen, grid, k, tau, max_iter);
    }
    let scheme = IssuanceScheme {
        div: DividendScheme::new(&gen, k, |_| true),
        mode,
        xs: grid.xs().to_vec(),
        lp: grid.mus().iter().map(|&m| spec.lambda_p.eval(m)).collect(),
        lf: match mode {
            Costs::Proportional => vec![0.0; grid.nmu()],
            Costs::Fixed => grid.mus().iter().map(|&m| spec.lambda_f.eval(m)).collect(),
        },
    };
    let init = IssueControl { div: vec![0.0; gen.len()], target: vec![None; gen.len()] };
    let out = run_policy_iteration(&scheme, init, tau, max_iter, LinearSolverKind::Direct)?;
    let policy = scheme.div.report_policy(&out.control.div);
    let mut boundaries = extract_boundaries(&policy, grid, k)?;
    // reported as the issuance rate in cash per unit time
    let w = k;
    let issuance = IssuanceField {
        rates: out.control.target.iter().map(|t| if t.is_some() { w } else { 0.0 }).collect(),
        targets: out.control.target.iter().map(|t| t.map(|m| grid.x(m))).collect(),
    };
    let issues_at_zero = |j: usize| out.control.target[grid.index(0, j)].is_some();
    boundaries.issuance_threshold = (0..grid.nmu()).find(|&j| issues_at_zero(j)).map(|j| grid.mu(j));
    if mode == Costs::Fixed {
        let targets = (0..grid.nmu())
            .map(|j| (0..grid.nx()).find_map(|i| issuance.targets[grid.index(i, j)]))
            .collect();
        boundaries.issuance_target = Some(targets);
    }
    Ok(ExtensionSolution { value: ValueField::new(out.values), policy, issuance: Some(issuance), boundaries, report: out.report })
}

/// Dividends plus equity issuance at proportional cost `lambda_p(mu)`.
pub fn solve_proportional_issuance(
    model: &ModelParams,
    grid: &Grid,
    spec: &IssuanceSpec,
    k: f64,
    tau: f64,
    max_iter: usize,
) -> Result<ExtensionSolution, ExtensionError> {
    solve_issuance(model, grid, spec, Costs::Proportional, k, tau, max_iter)
}

/// Dividends plus lump-sum issuance with fixed and proportional costs; the
/// target is chosen among the cash nodes of the same column.
pub fn solve_fixed_issuance(
    model: &ModelParams,
    grid: &Grid,
    spec: &IssuanceSpec,
    k: f64,
    tau: f64,
    max_iter: usize,
) -> Result<ExtensionSolution, ExtensionError> {
    solve_issuance(model, grid, spec, Costs::Fixed, k, tau, max_iter)
}

/// `max_{m > i} (V_m - cost(i, m)) - V_i` per node, against the ruin value 0
/// at the zero-cash node. Positive entries measure how far a node falls short
/// of the intervention value.
pub fn intervention_gap(grid: &Grid, value: &ValueField, spec: &IssuanceSpec) -> Vec<f64> {
    let v = value.values();
    let (nx, nmu) = (grid.nx(), grid.nmu());
    let mut out = vec![f64::NEG_INFINITY; v.len()];
    for j in 0..nmu {
        let mu = grid.mu(j);
        let (c, lf) = (1.0 + spec.lambda_p.eval(mu), spec.lambda_f.eval(mu));
        let mut best = f64::NEG_INFINITY;
        for i in (0..nx).rev() {
            let n = grid.index(i, j);
            if best > f64::NEG_INFINITY {
                let own = if i == 0 { v[n].max(0.0) } else { v[n] };
                out[n] = best + c * grid.x(i) - lf - own;
            }
            best = best.max(v[n] - c * grid.x(i));
        }
    }
    out
}

pub fn solve_credit_line(
    model: &ModelParams,
    grid: &Grid,
    spec: &CreditLineSpec,
    k: f64,
    tau: f64,
    max_iter: usize,
) -> Result<ExtensionSolution, ExtensionError> {
    check_penalty(k)?;
    if !(spec.rho_minus >= 0.0 && spec.rho_minus.is_finite()) {
        return Err(ExtensionError::InvalidSpec { field: "credit_line.rho_minus", reason: format!("must be >= 0, got {}", spec.rho_minus) });
    }
    if let LowerCurve::Table(t) = &spec.x_lower {
        if t.is_empty() || t.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(ExtensionError::InvalidSpec {
                field: "credit_line.x_lower",
                reason: "table needs increasing mu entries".into(),
            });
        }
    }
    let x_min = grid.spec.x_min;
    let tol = 1e-9 * grid.dx();
    let mut levels = Vec::with_capacity(grid.nmu());
    for &mu in grid.mus() {
        let level = spec.x_lower.eval(mu);
        if !(level <= 0.0 && level >= x_min - tol) {
            return Err(ExtensionError::MaskOutsideGrid { mu, level, x_min });
        }
        levels.push(level);
    }
    let cash = CashSetting { rho_minus: spec.rho_minus, ruin_level: levels };
    let gen = Generator::new(model, grid, Some(&cash)).map_err(SolverError::from)?;
    let scheme = DividendScheme::new(&gen, k, |_| true);
    let out = run_policy_iteration(&scheme, vec![0.0; gen.len()], tau, max_iter, LinearSolverKind::Direct)?;
    let policy = scheme.report_policy(&out.control);
    let boundaries = extract_boundaries(&policy, grid, k)?;
    Ok(ExtensionSolution { value: ValueField::new(out.values), policy, issuance: None, boundaries, report: out.report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::solver::{default_penalty, policy_iteration};

    fn setup(nx: usize, nmu: usize) -> (ModelParams, Grid, f64) {
        let m = ModelParams::ou_default();
        let g = Grid::build(GridSpec::new(4.0, -2.0, 2.0, nx, nmu), &m).unwrap();
        let k = default_penalty(&g);
        (m, g, k)
    }

    #[test]
    fn logistic_cost_decays_between_levels() {
        let c = CostCurve::Logistic { hi: 0.34, lo: 0.25, mid: 0.0, scale: 0.2 };
        assert!((c.eval(-10.0) - 0.34).abs() < 1e-9);
        assert!((c.eval(10.0) - 0.25).abs() < 1e-9);
        assert!((c.eval(0.0) - 0.295).abs() < 1e-12);
        assert!(c.eval(-0.5) > c.eval(0.5));
    }

    #[test]
    fn table_curve_interpolates() {
        let t = LowerCurve::Table(vec![(-1.0, -0.5), (1.0, -1.5)]);
        assert_eq!(t.eval(-2.0), -0.5);
        assert!((t.eval(0.0) + 1.0).abs() < 1e-15);
        assert_eq!(t.eval(3.0), -1.5);
    }

    #[test]
    fn prohibitive_issuance_matches_base() {
        let (m, g, k) = setup(41, 41);
        let (v, _, _) = policy_iteration(&m, &g, k, 0.0, 200, &PolicyField::zeros(g.len())).unwrap();
        for spec in [
            IssuanceSpec::proportional(CostCurve::constant(1e9)),
            IssuanceSpec::fixed(CostCurve::constant(0.3), CostCurve::constant(1e9)),
        ] {
            let s = if spec.lambda_f == CostCurve::constant(0.0) {
                solve_proportional_issuance(&m, &g, &spec, k, 0.0, 200).unwrap()
            } else {
                solve_fixed_issuance(&m, &g, &spec, k, 0.0, 200).unwrap()
            };
            assert!(s.value.sup_distance(&v) < 1e-9);
            assert!(s.issuance.unwrap().targets.iter().all(Option::is_none));
        }
    }

    #[test]
    fn proportional_issuance_dominates_base() {
        let (m, g, k) = setup(41, 41);
        let (v, _, _) = policy_iteration(&m, &g, k, 0.0, 200, &PolicyField::zeros(g.len())).unwrap();
        let s = solve_proportional_issuance(&m, &g, &IssuanceSpec::decaying_proportional(), k, 0.0, 200).unwrap();
        for n in 0..g.len() {
            assert!(s.value.values()[n] >= v.values()[n] - 1e-9);
        }
        assert!(s.boundaries.issuance_threshold.is_some());
    }

    #[test]
    fn fixed_issuance_below_proportional() {
        let (m, g, k) = setup(41, 41);
        let p = solve_proportional_issuance(&m, &g, &IssuanceSpec::decaying_proportional(), k, 0.0, 200).unwrap();
        let f = solve_fixed_issuance(&m, &g, &IssuanceSpec::decaying_fixed(), k, 0.0, 200).unwrap();
        let (v, _, _) = policy_iteration(&m, &g, k, 0.0, 200, &PolicyField::zeros(g.len())).unwrap();
        for n in 0..g.len() {
            let fv = f.value.values()[n];
            assert!(fv >= v.values()[n] - 1e-9, "node {n}");
            assert!(fv <= p.value.values()[n] + 1e-6, "node {n}: {fv} > {}", p.value.values()[n]);
        }
        let gap = intervention_gap(&g, &f.value, &IssuanceSpec::decaying_fixed());
        for j in 0..g.nmu() {
            assert!(gap[g.index(0, j)] <= 1e-9);
        }
    }

    #[test]
    fn degenerate_credit_line_is_bitwise_base() {
        let (m, g, k) = setup(31, 31);
        let (v, p, _) = policy_iteration(&m, &g, k, 0.0, 200, &PolicyField::zeros(g.len())).unwrap();
        let s = solve_credit_line(&m, &g, &CreditLineSpec { rho_minus: 0.0, x_lower: LowerCurve::Constant(0.0) }, k, 0.0, 200).unwrap();
        assert_eq!(s.value, v);
        assert_eq!(s.policy, p);
    }

    #[test]
    fn free_credit_line_shifts_the_base_solution() {
        // with no interest and a flat ruin level the problem is the base one translated in x
        let m = ModelParams::ou_default();
        let base = Grid::build(GridSpec::new(4.0, -2.0, 2.0, 41, 31), &m).unwrap();
        let mut spec = GridSpec::new(3.0, -2.0, 2.0, 41, 31);
        spec.x_min = -1.0;
        let g = Grid::build(spec, &m).unwrap();
        let k = default_penalty(&base);
        let (v, p, _) = policy_iteration(&m, &base, k, 0.0, 200, &PolicyField::zeros(base.len())).unwrap();
        let s = solve_credit_line(&m, &g, &CreditLineSpec { rho_minus: 0.0, x_lower: LowerCurve::Constant(-1.0) }, k, 0.0, 200).unwrap();
        for j in 0..g.nmu() {
            for i in 0..41 {
                let (a, b) = (v.at(&base, i, j), s.value.at(&g, i, j));
                assert!((a - b).abs() <= 1e-8 * (1.0 + a), "node ({i},{j}): {a} vs {b}");
            }
        }
        let bb = extract_boundaries(&p, &base, k).unwrap();
        assert_eq!(s.boundaries.mu_star, bb.mu_star);
        for (a, b) in bb.upper.iter().zip(&s.boundaries.upper) {
            assert_eq!(a.map(|a| (a - 1.0) * 10.0).map(f64::round), b.map(|b| b * 10.0).map(f64::round));
        }
    }

    #[test]
    fn credit_line_mask_must_fit_grid() {
        let (m, g, k) = setup(21, 21);
        let spec = CreditLineSpec { rho_minus: 0.01, x_lower: LowerCurve::Constant(-0.5) };
        assert!(matches!(solve_credit_line(&m, &g, &spec, k, 0.0, 50), Err(ExtensionError::MaskOutsideGrid { .. })));
    }
}
