//! Free-boundary extraction and regime classification from a converged policy.

use serde::Serialize;
use thiserror::Error;

use crate::grid::Grid;
use crate::solver::{PolicyField, ValueField};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("point (x={x}, mu={mu}) lies outside the grid box [{x_lo}, {x_hi}] x [{mu_lo}, {mu_hi}]")]
    OutOfBox { x: f64, mu: f64, x_lo: f64, x_hi: f64, mu_lo: f64, mu_hi: f64 },
    #[error("policy has {got} entries, grid has {expected} nodes")]
    ShapeMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum BoundaryWarning {
    /// The retain set of a column has gaps.
    NonContiguousRetainRegion { mu: f64 },
    /// A full-payout column not attached to the lower profitability edge.
    IsolatedPayoutColumn { mu: f64 },
    /// The dividend barrier reaches the upper cash edge: the domain is too small.
    Truncation { mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Region {
    Retain,
    PayExcess,
    Liquidate,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Boundaries {
    pub mus: Vec<f64>,
    pub lower: Vec<Option<f64>>,
    pub upper: Vec<Option<f64>>,
    pub mu_star: Option<f64>,
    /// Post-issuance cash level per column (fixed-cost issuance only).
    pub issuance_target: Option<Vec<Option<f64>>>,
    /// Smallest profitability at which equity is issued at zero cash.
    pub issuance_threshold: Option<f64>,
    pub x_range: (f64, f64),
    pub warnings: Vec<BoundaryWarning>,
}

pub fn extract_boundaries(policy: &PolicyField, grid: &Grid, k: f64) -> Result<Boundaries, AnalysisError> {
    if policy.len() != grid.len() {
        return Err(AnalysisError::ShapeMismatch { expected: grid.len(), got: policy.len() });
    }
    let (nx, nmu) = (grid.nx(), grid.nmu());
    let l = policy.rates();
    let mut lower = Vec::with_capacity(nmu);
    let mut upper = Vec::with_capacity(nmu);
    let mut warnings = Vec::new();
    for j in 0..nmu {
        let retain: Vec<usize> = (0..nx).filter(|&i| l[grid.index(i, j)] < 0.5 * k).collect();
        match (retain.first(), retain.last()) {
            (Some(&lo), Some(&hi)) => {
                if hi - lo + 1 != retain.len() {
                    warnings.push(BoundaryWarning::NonContiguousRetainRegion { mu: grid.mu(j) });
                }
                if hi + 1 == nx {
                    warnings.push(BoundaryWarning::Truncation { mu: grid.mu(j) });
                }
                lower.push(Some(grid.x(lo)));
                upper.push(Some(grid.x(hi)));
            }
            _ => {
                lower.push(None);
                upper.push(None);
            }
        }
    }
    let block = lower.iter().take_while(|c| c.is_none()).count();
    let mu_star = (block > 0).then(|| grid.mu(block - 1));
    for j in block..nmu {
        if lower[j].is_none() {
            warnings.push(BoundaryWarning::IsolatedPayoutColumn { mu: grid.mu(j) });
        }
    }
    Ok(Boundaries {
        mus: grid.mus().to_vec(),
        lower,
        upper,
        mu_star,
        issuance_target: None,
        issuance_threshold: None,
        x_range: (grid.spec.x_min, grid.spec.x_max),
        warnings,
    })
}

/// Replaces the node-resolution barrier by the linear interpolation of the
/// level set `D V = 1` between the last retain node and its neighbour.
pub fn interpolate_upper(boundaries: &mut Boundaries, grid: &Grid, value: &ValueField) {
    let v = value.values();
    let dx = grid.dx();
    for j in 0..grid.nmu() {
        let Some(xb) = boundaries.upper[j] else { continue };
        let i = grid.nearest_x(xb);
        if i == 0 || i + 1 >= grid.nx() {
            continue;
        }
        let s0 = (v[grid.index(i, j)] - v[grid.index(i - 1, j)]) / dx - 1.0;
        let s1 = (v[grid.index(i + 1, j)] - v[grid.index(i, j)]) / dx - 1.0;
        if s0 > 0.0 && s1 <= 0.0 {
            let t = s0 / (s0 - s1);
            boundaries.upper[j] = Some(xb + t * dx);
        }
    }
}

impl Boundaries {
    fn column_position(&self, mu: f64) -> (usize, f64) {
        let n = self.mus.len();
        let lo = self.mus[0];
        let step = (self.mus[n - 1] - lo) / (n - 1) as f64;
        let s = ((mu - lo) / step).clamp(0.0, (n - 1) as f64);
        let j = (s.floor() as usize).min(n - 2);
        (j, s - j as f64)
    }

    /// Linear interpolation in `mu`; where a neighbouring column is absent
    /// the nearer column decides.
    pub fn curve_at(curve: &[Option<f64>], b: &Boundaries, mu: f64) -> Option<f64> {
        let (j, t) = b.column_position(mu);
        match (curve[j], curve[j + 1]) {
            (Some(a), Some(c)) => Some(a + t * (c - a)),
            (a, c) => {
                if t < 0.5 {
                    a
                } else {
                    c
                }
            }
        }
    }

    pub fn lower_at(&self, mu: f64) -> Option<f64> {
        Self::curve_at(&self.lower, self, mu)
    }

    pub fn upper_at(&self, mu: f64) -> Option<f64> {
        Self::curve_at(&self.upper, self, mu)
    }

    pub fn contains(&self, x: f64, mu: f64) -> bool {
        let tol = 1e-12 * (1.0 + x.abs() + mu.abs());
        let (mlo, mhi) = (self.mus[0], self.mus[self.mus.len() - 1]);
        x >= self.x_range.0 - tol && x <= self.x_range.1 + tol && mu >= mlo - tol && mu <= mhi + tol
    }

    /// The retain set is `[lower, upper]`; both endpoints retain.
    pub fn classify_point(&self, x: f64, mu: f64) -> Result<Region, AnalysisError> {
        if !self.contains(x, mu) {
            return Err(AnalysisError::OutOfBox {
                x,
                mu,
                x_lo: self.x_range.0,
                x_hi: self.x_range.1,
                mu_lo: self.mus[0],
                mu_hi: self.mus[self.mus.len() - 1],
            });
        }
        if self.mu_star.is_some_and(|m| mu <= m) {
            return Ok(Region::Liquidate);
        }
        let (Some(lo), Some(hi)) = (self.lower_at(mu), self.upper_at(mu)) else {
            return Ok(Region::Liquidate);
        };
        let tol = 1e-12 * (1.0 + x.abs());
        Ok(if x < lo - tol {
            Region::Liquidate
        } else if x > hi + tol {
            Region::PayExcess
        } else {
            Region::Retain
        })
    }
}

pub fn classify_point(boundaries: &Boundaries, x: f64, mu: f64) -> Result<Region, AnalysisError> {
    boundaries.classify_point(x, mu)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::model::ModelParams;

    fn grid() -> Grid {
        Grid::build(GridSpec::new(2.0, -1.0, 1.0, 11, 9), &ModelParams::ou_default()).unwrap()
    }

    fn policy(g: &Grid, k: f64, pay: impl Fn(usize, usize) -> bool) -> PolicyField {
        let mut p = PolicyField::zeros(g.len());
        for (n, l) in p.rates_mut().iter_mut().enumerate() {
            let (i, j) = g.coords(n);
            *l = if pay(i, j) { k } else { 0.0 };
        }
        p
    }

    #[test]
    fn full_payout_everywhere() {
        let g = grid();
        let b = extract_boundaries(&policy(&g, 5.0, |_, _| true), &g, 5.0).unwrap();
        assert!(b.lower.iter().chain(&b.upper).all(Option::is_none));
        assert_eq!(b.mu_star, Some(g.spec.mu_max));
        assert_eq!(b.classify_point(1.0, 0.3).unwrap(), Region::Liquidate);
    }

    #[test]
    fn full_retain_everywhere() {
        let g = grid();
        let b = extract_boundaries(&PolicyField::zeros(g.len()), &g, 5.0).unwrap();
        assert!(b.lower.iter().all(|c| *c == Some(0.0)));
        assert!(b.upper.iter().all(|c| *c == Some(2.0)));
        assert_eq!(b.mu_star, None);
        assert_eq!(b.warnings.iter().filter(|w| matches!(w, BoundaryWarning::Truncation { .. })).count(), g.nmu());
    }

    #[test]
    fn band_barrier_and_threshold() {
        let g = grid();
        // columns 0..=1 pay everything; columns 2..=3 keep a band [4, 7]; others retain [0, 6]
        let p = policy(&g, 10.0, |i, j| match j {
            0 | 1 => true,
            2 | 3 => !(4..=7).contains(&i),
            _ => i > 6,
        });
        let b = extract_boundaries(&p, &g, 10.0).unwrap();
        assert_eq!(b.mu_star, Some(g.mu(1)));
        assert_eq!(b.lower[2], Some(g.x(4)));
        assert_eq!(b.upper[2], Some(g.x(7)));
        assert_eq!(b.lower[5], Some(0.0));
        assert!(b.warnings.is_empty());
        assert_eq!(b.classify_point(0.3, g.mu(1)).unwrap(), Region::Liquidate);
        assert_eq!(b.classify_point(g.x(7), g.mu(2)).unwrap(), Region::Retain);
        assert_eq!(b.classify_point(g.x(4), g.mu(2)).unwrap(), Region::Retain);
        assert_eq!(b.classify_point(g.x(3), g.mu(2)).unwrap(), Region::Liquidate);
        assert_eq!(b.classify_point(1.9, 0.15).unwrap(), Region::PayExcess);
        assert!(b.classify_point(2.5, 0.0).is_err());
        assert!(b.classify_point(1.0, -1.5).is_err());
        // node classification agrees with the policy
        for n in 0..g.len() {
            let (i, j) = g.coords(n);
            let retain = p.rates()[n] < 5.0;
            assert_eq!(b.classify_point(g.x(i), g.mu(j)).unwrap() == Region::Retain, retain, "node ({i},{j})");
        }
    }

    #[test]
    fn gaps_and_isolated_columns_warn() {
        let g = grid();
        let p = policy(&g, 1.0, |i, j| j == 4 || (j == 6 && i == 3));
        let b = extract_boundaries(&p, &g, 1.0).unwrap();
        assert_eq!(b.mu_star, None);
        assert!(b.warnings.contains(&BoundaryWarning::IsolatedPayoutColumn { mu: g.mu(4) }));
        assert!(b.warnings.contains(&BoundaryWarning::NonContiguousRetainRegion { mu: g.mu(6) }));
    }

    #[test]
    fn curves_interpolate_between_columns() {
        let g = grid();
        let p = policy(&g, 1.0, |i, j| i > 2 + j / 2);
        let b = extract_boundaries(&p, &g, 1.0).unwrap();
        let mid = 0.5 * (g.mu(1) + g.mu(2));
        let expect = 0.5 * (b.upper[1].unwrap() + b.upper[2].unwrap());
        assert!((b.upper_at(mid).unwrap() - expect).abs() < 1e-12);
    }
}
