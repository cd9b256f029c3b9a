//! Truncated rectangular (x, mu) domain and node bookkeeping.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DriftSpec, ModelParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid.{field} = {value} is too small: at least 3 nodes are required")]
    TooFewNodes { field: &'static str, value: usize },
    #[error("invalid grid range: {0}")]
    InvalidRange(String),
    #[error("profitability range [{mu_min}, {mu_max}] is not inside the drift domain [{lo}, {hi}]")]
    OutsideDomain { mu_min: f64, mu_max: f64, lo: f64, hi: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Lower end of the cash axis; zero except for credit-line runs.
    #[serde(default)]
    pub x_min: f64,
    pub x_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub nx: usize,
    pub nmu: usize,
    /// Permit `mu_min` on a boundary of the drift domain where the volatility vanishes.
    #[serde(default)]
    pub one_sided_boundary: bool,
}

impl GridSpec {
    pub fn new(x_max: f64, mu_min: f64, mu_max: f64, nx: usize, nmu: usize) -> Self {
        Self { x_min: 0.0, x_max, mu_min, mu_max, nx, nmu, one_sided_boundary: false }
    }

    /// Default truncation: `x_max = 5` and, for OU drifts,
    /// `mu_bar +- 6 sigma_tilde / sqrt(2k)` widened to contain `[-2, 2]`.
    /// CIR grids start one cell above `a`.
    pub fn default_for(model: &ModelParams, nx: usize, nmu: usize) -> Self {
        match model.drift {
            DriftSpec::OrnsteinUhlenbeck { k, mu_bar, sigma_tilde } => {
                let half = 6.0 * sigma_tilde / (2.0 * k).sqrt();
                Self::new(5.0, (mu_bar - half).min(-2.0), (mu_bar + half).max(2.0), nx, nmu)
            }
            DriftSpec::Cir { k, mu_bar, sigma_tilde, a } => {
                let hi = (mu_bar + 6.0 * sigma_tilde * (mu_bar - a).abs().sqrt() / (2.0 * k).sqrt()).max(a + 2.0);
                let dmu = (hi - a) / nmu as f64;
                Self::new(5.0, a + dmu, hi, nx, nmu)
            }
            DriftSpec::Custom(ref c) => {
                let lo = if c.domain.lo.is_finite() { c.domain.lo } else { -2.0 };
                let hi = if c.domain.hi.is_finite() { c.domain.hi } else { 2.0 };
                Self::new(5.0, lo, hi, nx, nmu)
            }
        }
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dmu(&self) -> f64 {
        (self.mu_max - self.mu_min) / (self.nmu - 1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum NodeTag {
    XZero,
    XMax,
    MuMin,
    MuMax,
    Interior,
    Corner,
}

/// Uniform tensor grid. Nodes are stored mu-major: `index = j * nx + i`
/// where `i` indexes cash and `j` profitability.
#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    pub spec: GridSpec,
    xs: Vec<f64>,
    mus: Vec<f64>,
}

impl Grid {
    pub fn build(spec: GridSpec, model: &ModelParams) -> Result<Self, GridError> {
        if spec.nx < 3 {
            return Err(GridError::TooFewNodes { field: "nx", value: spec.nx });
        }
        if spec.nmu < 3 {
            return Err(GridError::TooFewNodes { field: "nmu", value: spec.nmu });
        }
        if !(spec.x_max.is_finite() && spec.x_max > 0.0 && spec.x_min.is_finite() && spec.x_min < spec.x_max) {
            return Err(GridError::InvalidRange(format!(
                "need finite x_min < x_max with x_max > 0, got [{}, {}]",
                spec.x_min, spec.x_max
            )));
        }
        if spec.x_min > 0.0 {
            return Err(GridError::InvalidRange(format!("x_min must be <= 0, got {}", spec.x_min)));
        }
        if !(spec.mu_min.is_finite() && spec.mu_max.is_finite() && spec.mu_min < spec.mu_max) {
            return Err(GridError::InvalidRange(format!(
                "need finite mu_min < mu_max, got [{}, {}]",
                spec.mu_min, spec.mu_max
            )));
        }
        let domain = model.domain();
        let fits = domain.contains(spec.mu_min) && domain.contains(spec.mu_max);
        let degenerate_edge = spec.mu_min == domain.lo && model.sigma_tilde_unchecked(domain.lo) == 0.0;
        if !fits || (degenerate_edge && !spec.one_sided_boundary) {
            return Err(GridError::OutsideDomain { mu_min: spec.mu_min, mu_max: spec.mu_max, lo: domain.lo, hi: domain.hi });
        }
        let dx = spec.dx();
        let dmu = spec.dmu();
        // keep zero cash exact when it falls on a node
        let xs = (0..spec.nx).map(|i| spec.x_min + i as f64 * dx).map(|x| if x.abs() < 1e-9 * dx { 0.0 } else { x }).collect();
        let mus = (0..spec.nmu).map(|j| spec.mu_min + j as f64 * dmu).collect();
        Ok(Self { spec, xs, mus })
    }

    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn nmu(&self) -> usize {
        self.spec.nmu
    }

    pub fn len(&self) -> usize {
        self.spec.nx * self.spec.nmu
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dx(&self) -> f64 {
        self.spec.dx()
    }

    pub fn dmu(&self) -> f64 {
        self.spec.dmu()
    }

    pub fn xs(&self) -> &[f64] {
        &self.xs
    }

    pub fn mus(&self) -> &[f64] {
        &self.mus
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.xs[i]
    }

    #[inline]
    pub fn mu(&self, j: usize) -> f64 {
        self.mus[j]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.spec.nx + i
    }

    #[inline]
    pub fn coords(&self, n: usize) -> (usize, usize) {
        (n % self.spec.nx, n / self.spec.nx)
    }

    /// Index of the node with `x = 0` (the cash grid may extend below zero).
    pub fn zero_cash_index(&self) -> Option<usize> {
        self.xs.iter().position(|&x| x.abs() <= 1e-12 * self.dx())
    }

    pub fn tag(&self, i: usize, j: usize) -> NodeTag {
        let x_edge = i == 0 || i + 1 == self.spec.nx;
        let mu_edge = j == 0 || j + 1 == self.spec.nmu;
        match (x_edge, mu_edge) {
            (true, true) => NodeTag::Corner,
            (true, false) => {
                if i == 0 {
                    NodeTag::XZero
                } else {
                    NodeTag::XMax
                }
            }
            (false, true) => {
                if j == 0 {
                    NodeTag::MuMin
                } else {
                    NodeTag::MuMax
                }
            }
            (false, false) => NodeTag::Interior,
        }
    }

    pub fn contains(&self, x: f64, mu: f64) -> bool {
        x >= self.spec.x_min && x <= self.spec.x_max && mu >= self.spec.mu_min && mu <= self.spec.mu_max
    }

    /// Index of the cash node nearest to `x`, clamped to the grid.
    pub fn nearest_x(&self, x: f64) -> usize {
        (((x - self.spec.x_min) / self.dx()).round().max(0.0) as usize).min(self.spec.nx - 1)
    }

    pub fn nearest_mu(&self, mu: f64) -> usize {
        (((mu - self.spec.mu_min) / self.dmu()).round().max(0.0) as usize).min(self.spec.nmu - 1)
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn model() -> ModelParams {
        ModelParams::ou_default()
    }

    #[test]
    fn three_by_three_tags() {
        let g = Grid::build(GridSpec::new(1.0, -1.0, 1.0, 3, 3), &model()).unwrap();
        let mut counts: HashMap<NodeTag, usize> = HashMap::new();
        for j in 0..3 {
            for i in 0..3 {
                *counts.entry(g.tag(i, j)).or_default() += 1;
            }
        }
        assert_eq!(g.len(), 9);
        assert_eq!(counts[&NodeTag::Interior], 1);
        assert_eq!(counts[&NodeTag::Corner], 4);
        let edges = counts[&NodeTag::XZero] + counts[&NodeTag::XMax] + counts[&NodeTag::MuMin] + counts[&NodeTag::MuMax];
        assert_eq!(edges, 4);
        assert_eq!(counts.values().sum::<usize>(), 9);
    }

    #[test]
    fn node_counts_match_reference_grids() {
        let m = model();
        assert_eq!(Grid::build(GridSpec::new(5.0, -2.0, 2.0, 300, 300), &m).unwrap().len(), 90_000);
        assert_eq!(Grid::build(GridSpec::new(5.0, -2.0, 2.0, 1000, 1000), &m).unwrap().len(), 1_000_000);
    }

    #[test]
    fn rejects_small_and_out_of_domain_grids() {
        let m = model();
        assert!(matches!(
            Grid::build(GridSpec::new(1.0, -1.0, 1.0, 2, 5), &m),
            Err(GridError::TooFewNodes { field: "nx", .. })
        ));
        assert!(matches!(
            Grid::build(GridSpec::new(1.0, -1.0, 1.0, 5, 2), &m),
            Err(GridError::TooFewNodes { field: "nmu", .. })
        ));
        let cir = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Cir { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3, a: 0.0 })
            .unwrap();
        assert!(matches!(
            Grid::build(GridSpec::new(1.0, -0.5, 1.0, 5, 5), &cir),
            Err(GridError::OutsideDomain { .. })
        ));
        // mu_min = a needs the one-sided flag
        assert!(Grid::build(GridSpec::new(1.0, 0.0, 1.0, 5, 5), &cir).is_err());
        let mut spec = GridSpec::new(1.0, 0.0, 1.0, 5, 5);
        spec.one_sided_boundary = true;
        assert!(Grid::build(spec, &cir).is_ok());
    }

    #[test]
    fn default_truncation_covers_plotted_window() {
        let spec = GridSpec::default_for(&model(), 101, 101);
        assert!(spec.x_max > 3.0);
        assert!(spec.mu_min < -1.1 && spec.mu_max > 1.2);
        let cir = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Cir { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3, a: -1.0 })
            .unwrap();
        let spec = GridSpec::default_for(&cir, 51, 51);
        assert!(spec.mu_min > -1.0);
        assert!(Grid::build(spec, &cir).is_ok());
    }

    #[test]
    fn nested_refinement() {
        let m = model();
        let coarse = Grid::build(GridSpec::new(4.0, -2.0, 2.0, 17, 9), &m).unwrap();
        let fine = Grid::build(GridSpec::new(4.0, -2.0, 2.0, 33, 17), &m).unwrap();
        for (i, &x) in coarse.xs().iter().enumerate() {
            assert_eq!(x, fine.x(2 * i));
        }
        for (j, &mu) in coarse.mus().iter().enumerate() {
            assert!((mu - fine.mu(2 * j)).abs() < 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn coordinates_reconstruct_exactly(nx in 3usize..60, nmu in 3usize..60, x_max in 0.5f64..10.0, lo in -5.0f64..0.0, w in 0.1f64..5.0) {
            let g = Grid::build(GridSpec::new(x_max, lo, lo + w, nx, nmu), &ModelParams::ou_default()).unwrap();
            for n in 0..g.len() {
                let (i, j) = g.coords(n);
                proptest::prop_assert_eq!(g.index(i, j), n);
                proptest::prop_assert_eq!(g.x(i), i as f64 * g.dx());
                proptest::prop_assert_eq!(g.mu(j), lo + j as f64 * g.dmu());
            }
        }
    }
}
