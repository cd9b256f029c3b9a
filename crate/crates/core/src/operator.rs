//! Monotone finite-difference discretization of the penalized HJB residual
//! `rV - LV + l (V_x - 1)` on a [`Grid`].
//!
//! Row conventions:
//! * cash-zero nodes (and masked nodes below a credit-line ruin curve) carry `V = 0`;
//! * `x_max` nodes carry the one-sided reflection `V[N] - V[N-1] = dx`;
//! * every other node carries the generator row. First-order terms are
//!   upwinded, second-order terms are central and the cross derivative uses
//!   the seven-point stencil whose diagonal matches the sign of `rho`.
//!   Reflection on the profitability edges mirrors the ghost node onto the
//!   inner neighbour.
//!
//! The dividend term `l V_x` is differenced backward independently of the
//! profitability-driven cash drift, so the row stays monotone for every
//! `l >= 0` and the residual is affine in `l`.

use serde::Serialize;
use thiserror::Error;

use crate::grid::Grid;
use crate::model::ModelParams;
use crate::solver::PolicyField;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error(
        "cross term |rho sigma sigma_tilde| = {cross:.6e} at node (i={i}, j={j}) breaks monotonicity; \
         the aspect ratio dx/dmu = {ratio:.6} must lie in [{ratio_lo:.6}, {ratio_hi:.6}]"
    )]
    MonotonicityViolation { i: usize, j: usize, cross: f64, ratio: f64, ratio_lo: f64, ratio_hi: f64 },
    #[error("control {value} at node {node} lies outside [0, {k}]")]
    ControlOutOfRange { node: usize, value: f64, k: f64 },
    #[error("policy has {got} entries, grid has {expected} nodes")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("penalization K must be finite and > 0, got {0}")]
    InvalidPenalty(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RowKind {
    /// `V = 0`: ruin.
    Ruin,
    /// `V[N] - V[N-1] = dx` on the upper cash edge.
    Reflect,
    /// Generator row with controls.
    Pde,
    /// Exact boundary row produced by an issuance choice, `V - V[target] = -cost`.
    Issue,
}

/// Sparse rows in compressed-row form with an affine right-hand side:
/// the discrete equation is `A V = rhs`.
#[derive(Debug, Clone)]
pub struct DiscreteOperator {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
    pub rhs: Vec<f64>,
    pub kinds: Vec<RowKind>,
}

impl DiscreteOperator {
    pub fn row(&self, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[n]..self.row_ptr[n + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn diagonal(&self, n: usize) -> f64 {
        self.row(n).find(|&(c, _)| c == n).map_or(0.0, |(_, v)| v)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|n| self.row(n).map(|(c, a)| a * v[c]).sum()).collect()
    }

    /// `A v - rhs`.
    pub fn residual(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|n| self.row(n).map(|(c, a)| a * v[c]).sum::<f64>() - self.rhs[n]).collect()
    }

    pub fn max_row_width(&self) -> usize {
        (0..self.n).map(|n| self.row_ptr[n + 1] - self.row_ptr[n]).max().unwrap_or(0)
    }

    /// Row-wise M-matrix check. Off-diagonal entries must be non-positive;
    /// generator rows need `diag >= r + sum |offdiag|`, boundary rows need
    /// `diag >= sum |offdiag|` with a positive diagonal.
    pub fn check_monotone(&self, r: f64) -> Vec<RowViolation> {
        let mut out = Vec::new();
        for n in 0..self.n {
            let mut diag = 0.0;
            let mut off = 0.0;
            let mut scale = 0.0f64;
            let mut positive_off = false;
            for (c, a) in self.row(n) {
                scale = scale.max(a.abs());
                if c == n {
                    diag += a;
                } else {
                    if a > 0.0 {
                        positive_off = true;
                    }
                    off += a.abs();
                }
            }
            let margin = if self.kinds[n] == RowKind::Pde { r } else { 0.0 };
            let tol = 1e-12 * scale.max(1.0);
            let dominant = diag > 0.0 && diag + tol >= margin + off;
            if positive_off || !dominant {
                out.push(RowViolation { node: n, kind: self.kinds[n], diag, offdiag_sum: off, positive_offdiag: positive_off });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowViolation {
    pub node: usize,
    pub kind: RowKind,
    pub diag: f64,
    pub offdiag_sum: f64,
    pub positive_offdiag: bool,
}

/// Incremental CSR builder; repeated columns within a row are summed and
/// each finished row is sorted by column.
#[derive(Debug, Default)]
pub(crate) struct RowBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    rhs: Vec<f64>,
    kinds: Vec<RowKind>,
    open: usize,
}

impl RowBuilder {
    pub fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        Self {
            row_ptr,
            cols: Vec::with_capacity(nnz),
            vals: Vec::with_capacity(nnz),
            rhs: Vec::with_capacity(n),
            kinds: Vec::with_capacity(n),
            open: 0,
        }
    }

    pub fn start(&mut self, kind: RowKind) {
        self.open = self.cols.len();
        self.kinds.push(kind);
        self.rhs.push(0.0);
    }

    #[inline]
    pub fn add(&mut self, col: usize, val: f64) {
        for k in self.open..self.cols.len() {
            if self.cols[k] == col {
                self.vals[k] += val;
                return;
            }
        }
        self.cols.push(col);
        self.vals.push(val);
    }

    #[inline]
    pub fn add_rhs(&mut self, val: f64) {
        *self.rhs.last_mut().expect("row started") += val;
    }

    pub fn finish(&mut self) {
        let start = self.open;
        let end = self.cols.len();
        // insertion sort: rows have at most a dozen entries
        for a in start + 1..end {
            let mut b = a;
            while b > start && self.cols[b - 1] > self.cols[b] {
                self.cols.swap(b - 1, b);
                self.vals.swap(b - 1, b);
                b -= 1;
            }
        }
        self.row_ptr.push(end);
    }

    pub fn build(self) -> DiscreteOperator {
        let n = self.kinds.len();
        debug_assert_eq!(self.row_ptr.len(), n + 1);
        DiscreteOperator { n, row_ptr: self.row_ptr, cols: self.cols, vals: self.vals, rhs: self.rhs, kinds: self.kinds }
    }
}

/// Cash-drift modification and ruin curve of a credit line.
#[derive(Debug, Clone)]
pub(crate) struct CashSetting {
    /// Interest charged on negative cash.
    pub rho_minus: f64,
    /// Per-column ruin level; nodes with `x <= level` carry `V = 0`.
    pub ruin_level: Vec<f64>,
}

/// The control-independent part of the discretization: `rI - L` on
/// generator rows plus the fixed boundary rows. Built once per solve.
#[derive(Debug, Clone)]
pub(crate) struct Generator {
    pub nx: usize,
    pub nmu: usize,
    pub dx: f64,
    pub kinds: Vec<RowKind>,
    /// Cash index of the highest ruin node per profitability column.
    pub bottom: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Generator {
    pub fn new(model: &ModelParams, grid: &Grid, cash: Option<&CashSetting>) -> Result<Self, OperatorError> {
        let nx = grid.nx();
        let nmu = grid.nmu();
        let dx = grid.dx();
        let dmu = grid.dmu();
        let n = grid.len();
        let mut kinds = Vec::with_capacity(n);
        let mut bottom = vec![0; nmu];
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        let mut cols = Vec::with_capacity(9 * n);
        let mut vals = Vec::with_capacity(9 * n);

        let sx2 = 0.5 * model.sigma * model.sigma;
        for j in 0..nmu {
            let mu = grid.mu(j);
            let kappa = model.kappa_unchecked(mu);
            let st = model.sigma_tilde_unchecked(mu);
            let smu2 = 0.5 * st * st;
            let cross = model.rho * model.sigma * st;
            let mu_edge = j == 0 || j + 1 == nmu;
            if !mu_edge && cross != 0.0 {
                let lim_x = model.sigma * model.sigma * dmu / dx;
                let lim_mu = st * st * dx / dmu;
                let slack = 1e-12 * cross.abs();
                if cross.abs() > lim_x + slack || cross.abs() > lim_mu + slack {
                    let c = cross.abs();
                    return Err(OperatorError::MonotonicityViolation {
                        i: 1,
                        j,
                        cross: c,
                        ratio: dx / dmu,
                        ratio_lo: c / (st * st),
                        ratio_hi: model.sigma * model.sigma / c,
                    });
                }
            }
            let level = cash.map(|c| c.ruin_level[j]);
            for i in 0..nx {
                let node = grid.index(i, j);
                let ruin = i == 0 || level.is_some_and(|l| grid.x(i) <= l + 1e-9 * dx);
                if ruin {
                    bottom[j] = i;
                }
                if ruin {
                    kinds.push(RowKind::Ruin);
                    cols.push(node);
                    vals.push(1.0);
                } else if i + 1 == nx {
                    kinds.push(RowKind::Reflect);
                    cols.push(node - 1);
                    vals.push(-1.0);
                    cols.push(node);
                    vals.push(1.0);
                } else {
                    kinds.push(RowKind::Pde);
                    let start = cols.len();
                    let mut push = |c: usize, v: f64| {
                        for k in start..cols.len() {
                            if cols[k] == c {
                                vals[k] += v;
                                return;
                            }
                        }
                        cols.push(c);
                        vals.push(v);
                    };
                    let x = grid.x(i);
                    let mut bx = mu;
                    if let Some(c) = cash {
                        if x < 0.0 {
                            bx += c.rho_minus * x;
                        }
                    }
                    let (bxp, bxm) = (bx.max(0.0), (-bx).max(0.0));
                    let (bmp, bmm) = (kappa.max(0.0), (-kappa).max(0.0));
                    let mut diag = model.r;
                    // cash direction
                    push(node + 1, -(bxp / dx + sx2 / (dx * dx)));
                    push(node - 1, -(bxm / dx + sx2 / (dx * dx)));
                    diag += (bxp + bxm) / dx + 2.0 * sx2 / (dx * dx);
                    // profitability direction, mirrored ghost on the edges
                    let up_w = bmp / dmu + smu2 / (dmu * dmu);
                    let down_w = bmm / dmu + smu2 / (dmu * dmu);
                    let up = if j + 1 < nmu { node + nx } else { node - nx };
                    let down = if j > 0 { node - nx } else { node + nx };
                    push(up, -up_w);
                    push(down, -down_w);
                    diag += up_w + down_w;
                    if !mu_edge && cross != 0.0 {
                        let w = cross.abs() / (2.0 * dx * dmu);
                        push(node + 1, w);
                        push(node - 1, w);
                        push(node + nx, w);
                        push(node - nx, w);
                        if cross > 0.0 {
                            push(node + nx + 1, -w);
                            push(node - nx - 1, -w);
                        } else {
                            push(node - nx + 1, -w);
                            push(node + nx - 1, -w);
                        }
                        diag -= 2.0 * w;
                    }
                    push(node, diag);
                    // keep rows sorted
                    let end = cols.len();
                    for a in start + 1..end {
                        let mut b = a;
                        while b > start && cols[b - 1] > cols[b] {
                            cols.swap(b - 1, b);
                            vals.swap(b - 1, b);
                            b -= 1;
                        }
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        Ok(Self { nx, nmu, dx, kinds, bottom, row_ptr, cols, vals })
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn row(&self, n: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[n]..self.row_ptr[n + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    /// Copies the generator row into the builder, leaving it open for controls.
    pub fn emit_row(&self, b: &mut RowBuilder, n: usize) {
        b.start(self.kinds[n]);
        for (c, a) in self.row(n) {
            b.add(c, a);
        }
        if self.kinds[n] == RowKind::Reflect {
            b.add_rhs(self.dx);
        }
    }
}

/// Assembles the penalized operator for dividend rates `policy` with
/// penalization `k`.
pub fn assemble(model: &ModelParams, grid: &Grid, policy: &PolicyField, k: f64) -> Result<DiscreteOperator, OperatorError> {
    if !(k.is_finite() && k > 0.0) {
        return Err(OperatorError::InvalidPenalty(k));
    }
    if policy.len() != grid.len() {
        return Err(OperatorError::ShapeMismatch { expected: grid.len(), got: policy.len() });
    }
    for (node, &l) in policy.rates().iter().enumerate() {
        if !(0.0..=k).contains(&l) {
            return Err(OperatorError::ControlOutOfRange { node, value: l, k });
        }
    }
    let gen = Generator::new(model, grid, None)?;
    Ok(assemble_dividend(&gen, policy.rates()))
}

pub(crate) fn assemble_dividend(gen: &Generator, rates: &[f64]) -> DiscreteOperator {
    let dx = gen.dx;
    let mut b = RowBuilder::with_capacity(gen.len(), 10 * gen.len());
    for n in 0..gen.len() {
        gen.emit_row(&mut b, n);
        if gen.kinds[n] == RowKind::Pde {
            add_dividend(&mut b, n, rates[n], dx);
        }
        b.finish();
    }
    b.build()
}

/// `l (D^- V - 1)` contributions.
#[inline]
pub(crate) fn add_dividend(b: &mut RowBuilder, n: usize, l: f64, dx: f64) {
    if l != 0.0 {
        b.add(n, l / dx);
        b.add(n - 1, -l / dx);
        b.add_rhs(l);
    }
}
