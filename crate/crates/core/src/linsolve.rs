//! Linear solves for the policy-evaluation step.
//!
//! The default path is a sparse LU factorization (faer). The operator is
//! stored by rows, which faer reads as the column-compressed transpose, so
//! we factor `A^T` and solve with its transpose. The symbolic analysis is
//! cached while the sparsity pattern stays the same. If the backward error
//! after refinement is above the target, an ILU(0)-preconditioned BiCGSTAB
//! takes over from the direct iterate.

use faer::prelude::*;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::operator::DiscreteOperator;

pub const DEFAULT_RESIDUAL_TARGET: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinearSolveError {
    #[error("sparse factorization failed: {0}")]
    Factorization(String),
    #[error("linear solve stalled at backward error {0:.3e}")]
    Stalled(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolverKind {
    #[default]
    Direct,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveStats {
    /// Normwise backward error `max_i |b - Ax|_i / (|A||x| + |b|)_i`.
    pub backward_error: f64,
    pub used_fallback: bool,
}

pub struct LinearSolver {
    kind: LinearSolverKind,
    target: f64,
    cached: Option<(Vec<usize>, Vec<usize>, SymbolicLu<usize>)>,
}

impl Default for LinearSolver {
    fn default() -> Self {
        Self::new(LinearSolverKind::Direct)
    }
}

impl LinearSolver {
    pub fn new(kind: LinearSolverKind) -> Self {
        Self { kind, target: DEFAULT_RESIDUAL_TARGET, cached: None }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target = target;
        self
    }

    /// Solves `A v = rhs`; `guess` seeds the iterative path.
    pub fn solve(&mut self, op: &DiscreteOperator, guess: Option<&[f64]>) -> Result<(Vec<f64>, SolveStats), LinearSolveError> {
        match self.kind {
            LinearSolverKind::Direct => match self.direct(op) {
                Ok(v) => {
                    let err = backward_error(op, &v);
                    if err <= self.target {
                        return Ok((v, SolveStats { backward_error: err, used_fallback: false }));
                    }
                    log::debug!("direct solve backward error {err:.3e}, switching to BiCGSTAB");
                    self.iterative(op, Some(&v), true)
                }
                Err(e) => {
                    log::warn!("{e}; switching to BiCGSTAB");
                    self.iterative(op, guess, true)
                }
            },
            LinearSolverKind::Iterative => self.iterative(op, guess, false),
        }
    }

    fn direct(&mut self, op: &DiscreteOperator) -> Result<Vec<f64>, LinearSolveError> {
        let n = op.n;
        let same = matches!(&self.cached, Some((p, c, _)) if *p == op.row_ptr && *c == op.cols);
        if !same {
            let sym = SymbolicSparseColMatRef::new_checked(n, n, &op.row_ptr, None, &op.cols);
            let lu = SymbolicLu::try_new(sym).map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
            self.cached = Some((op.row_ptr.clone(), op.cols.clone(), lu));
        }
        let (ptr, cols, symbolic) = self.cached.as_ref().expect("cached symbolic factorization");
        let sym = SymbolicSparseColMatRef::new_checked(n, n, ptr, None, cols);
        let at = SparseColMatRef::new(sym, &op.vals);
        let lu = Lu::try_new_with_symbolic(symbolic.clone(), at).map_err(|e| LinearSolveError::Factorization(format!("{e:?}")))?;
        let mut x = Col::<f64>::from_fn(n, |i| op.rhs[i]);
        lu.solve_transpose_in_place(x.as_mut());
        let mut v: Vec<f64> = x.iter().copied().collect();
        // two steps of iterative refinement against the assembled rows
        for _ in 0..2 {
            if backward_error(op, &v) <= 0.01 * self.target {
                break;
            }
            let res = op.residual(&v);
            let mut d = Col::<f64>::from_fn(n, |i| -res[i]);
            lu.solve_transpose_in_place(d.as_mut());
            for (vi, di) in v.iter_mut().zip(d.iter()) {
                *vi += *di;
            }
        }
        Ok(v)
    }

    fn iterative(&self, op: &DiscreteOperator, guess: Option<&[f64]>, fallback: bool) -> Result<(Vec<f64>, SolveStats), LinearSolveError> {
        let x0 = guess.map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; op.n]);
        let v = bicgstab(op, x0, self.target, 20 * op.n.max(100))?;
        let err = backward_error(op, &v);
        if err > self.target {
            return Err(LinearSolveError::Stalled(err));
        }
        Ok((v, SolveStats { backward_error: err, used_fallback: fallback }))
    }
}

pub fn backward_error(op: &DiscreteOperator, v: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for n in 0..op.n {
        let mut ax = 0.0;
        let mut scale = op.rhs[n].abs();
        for (c, a) in op.row(n) {
            ax += a * v[c];
            scale += (a * v[c]).abs();
        }
        let r = (op.rhs[n] - ax).abs();
        if r > 0.0 {
            worst = worst.max(r / scale.max(f64::MIN_POSITIVE));
        }
    }
    worst
}

/// ILU(0) factors stored on the operator's own pattern.
struct Ilu0 {
    vals: Vec<f64>,
    diag_pos: Vec<usize>,
}

impl Ilu0 {
    fn new(op: &DiscreteOperator) -> Result<Self, LinearSolveError> {
        let mut vals = op.vals.clone();
        let mut diag_pos = vec![usize::MAX; op.n];
        for i in 0..op.n {
            for k in op.row_ptr[i]..op.row_ptr[i + 1] {
                if op.cols[k] == i {
                    diag_pos[i] = k;
                }
            }
            if diag_pos[i] == usize::MAX {
                return Err(LinearSolveError::Factorization(format!("row {i} has no diagonal")));
            }
        }
        for i in 0..op.n {
            let (start, end) = (op.row_ptr[i], op.row_ptr[i + 1]);
            for kk in start..end {
                let k = op.cols[kk];
                if k >= i {
                    break;
                }
                let pivot = vals[diag_pos[k]];
                if pivot == 0.0 {
                    return Err(LinearSolveError::Factorization(format!("zero pivot at row {k}")));
                }
                let factor = vals[kk] / pivot;
                vals[kk] = factor;
                // row_i[j] -= factor * row_k[j] for j > k present in both patterns
                let mut p = kk + 1;
                for q in diag_pos[k] + 1..op.row_ptr[k + 1] {
                    let j = op.cols[q];
                    while p < end && op.cols[p] < j {
                        p += 1;
                    }
                    if p < end && op.cols[p] == j {
                        vals[p] -= factor * vals[q];
                    }
                }
            }
        }
        Ok(Self { vals, diag_pos })
    }

    fn apply(&self, op: &DiscreteOperator, b: &[f64], out: &mut [f64]) {
        let n = op.n;
        for i in 0..n {
            let mut s = b[i];
            for k in op.row_ptr[i]..self.diag_pos[i] {
                s -= self.vals[k] * out[op.cols[k]];
            }
            out[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = out[i];
            for k in self.diag_pos[i] + 1..op.row_ptr[i + 1] {
                s -= self.vals[k] * out[op.cols[k]];
            }
            out[i] = s / self.vals[self.diag_pos[i]];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Right-preconditioned BiCGSTAB on the assembled rows.
fn bicgstab(op: &DiscreteOperator, mut x: Vec<f64>, target: f64, max_iter: usize) -> Result<Vec<f64>, LinearSolveError> {
    let n = op.n;
    let ilu = Ilu0::new(op)?;
    let mut r: Vec<f64> = op.residual(&x).into_iter().map(|v| -v).collect();
    let r0 = r.clone();
    let mut p = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; n];
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    for it in 0..max_iter {
        if it % 10 == 0 && backward_error(op, &x) <= 0.1 * target {
            return Ok(x);
        }
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        ilu.apply(op, &p, &mut y);
        v = op.apply(&y);
        let denom = dot(&r0, &v);
        if denom == 0.0 {
            break;
        }
        alpha = rho / denom;
        let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
        ilu.apply(op, &s, &mut z);
        let t = op.apply(&z);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    let err = backward_error(op, &x);
    if err <= target {
        Ok(x)
    } else {
        Err(LinearSolveError::Stalled(err))
    }
}
