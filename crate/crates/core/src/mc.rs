//! Monte Carlo evaluation of an extracted boundary policy.
//!
//! Euler-Maruyama on `(X, mu)` with correlated increments. Each path draws
//! from its own ChaCha8 stream (`seed`, stream = path index), and payoffs are
//! reduced in path order, so results do not depend on the thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::Boundaries;
use crate::model::ModelParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("invalid simulation setting `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("start (x={x}, mu={mu}) lies outside the boundary grid box")]
    StartOutOfBox { x: f64, mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_paths: usize,
    pub dt: f64,
    pub t_horizon: f64,
    pub seed: u64,
    /// Negate every Gaussian draw.
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    /// Horizon beyond which discounting shrinks any payoff below `1e-4` of its size.
    pub fn default_horizon(r: f64) -> f64 {
        (1e4f64).ln() / r
    }

    pub fn new(n_paths: usize, dt: f64, t_horizon: f64, seed: u64) -> Self {
        Self { n_paths, dt, t_horizon, seed, antithetic: false }
    }

    pub fn validate(&self) -> Result<(), McError> {
        let bad = |field, reason: String| Err(McError::InvalidConfig { field, reason });
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("dt", format!("must be > 0, got {}", self.dt));
        }
        if !(self.t_horizon >= 100.0 * self.dt && self.t_horizon.is_finite()) {
            return bad("t_horizon", format!("must be finite and >= 100 dt, got {}", self.t_horizon));
        }
        if self.n_paths < 100 {
            return bad("n_paths", format!("must be >= 100, got {}", self.n_paths));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_ruined: usize,
    pub n_censored: usize,
    pub n_liquidated: usize,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Fate {
    Ruined,
    Censored,
    Liquidated,
}

/// Boundary curves laid out for fast lookup; absent entries are NaN.
struct Curves {
    mu0: f64,
    step: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    mu_star: f64,
}

impl Curves {
    fn new(b: &Boundaries) -> Self {
        let n = b.mus.len();
        Self {
            mu0: b.mus[0],
            step: (b.mus[n - 1] - b.mus[0]) / (n - 1) as f64,
            lower: b.lower.iter().map(|c| c.unwrap_or(f64::NAN)).collect(),
            upper: b.upper.iter().map(|c| c.unwrap_or(f64::NAN)).collect(),
            mu_star: b.mu_star.unwrap_or(f64::NEG_INFINITY),
        }
    }

    /// Linear interpolation; an absent neighbour defers to the nearer column.
    #[inline]
    fn at(&self, curve: &[f64], mu: f64) -> f64 {
        let last = (curve.len() - 1) as f64;
        let s = ((mu - self.mu0) / self.step).clamp(0.0, last);
        let j = (s as usize).min(curve.len() - 2);
        let t = s - j as f64;
        let (a, c) = (curve[j], curve[j + 1]);
        if a.is_nan() || c.is_nan() {
            if t < 0.5 {
                a
            } else {
                c
            }
        } else {
            a + t * (c - a)
        }
    }
}

fn simulate_path(model: &ModelParams, curves: &Curves, x0: f64, mu0: f64, cfg: &SimConfig, path: u64) -> (f64, Fate) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(path);
    let sign = if cfg.antithetic { -1.0 } else { 1.0 };
    let rho_c = (1.0 - model.rho * model.rho).max(0.0).sqrt();
    let sq = cfg.dt.sqrt();
    let decay = (-model.r * cfg.dt).exp();
    let lo_mu = model.domain().lo;
    let (mut x, mut mu) = (x0, mu0);
    let mut disc = 1.0;
    let mut payoff = 0.0;
    let mut t = 0.0;
    loop {
        let lower = curves.at(&curves.lower, mu);
        if mu <= curves.mu_star || lower.is_nan() || x < lower {
            return (payoff + disc * x, Fate::Liquidated);
        }
        let upper = curves.at(&curves.upper, mu);
        if x > upper {
            payoff += disc * (x - upper);
            x = upper;
        }
        if t >= cfg.t_horizon {
            return (payoff, Fate::Censored);
        }
        let z1 = sign * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let zb = sign * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        let z2 = model.rho * z1 + rho_c * zb;
        x += mu * cfg.dt + model.sigma * sq * z1;
        mu += model.kappa_unchecked(mu) * cfg.dt + model.sigma_tilde_unchecked(mu) * sq * z2;
        if mu < lo_mu {
            mu = lo_mu;
        }
        t += cfg.dt;
        disc *= decay;
        if x < 0.0 {
            return (payoff, Fate::Ruined);
        }
    }
}

pub fn simulate_policy(model: &ModelParams, boundaries: &Boundaries, start: (f64, f64), cfg: &SimConfig) -> Result<McEstimate, McError> {
    cfg.validate()?;
    let (x0, mu0) = start;
    if !boundaries.contains(x0, mu0) {
        return Err(McError::StartOutOfBox { x: x0, mu: mu0 });
    }
    let curves = Curves::new(boundaries);
    let results: Vec<(f64, Fate)> =
        (0..cfg.n_paths as u64).into_par_iter().map(|p| simulate_path(model, &curves, x0, mu0, cfg, p)).collect();
    let n = results.len() as f64;
    // shifted sums: identical payoffs give their value and zero spread exactly
    let shift = results[0].0;
    let mean = shift + results.iter().map(|r| r.0 - shift).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let count = |f: Fate| results.iter().filter(|r| r.1 == f).count();
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        n_paths: cfg.n_paths,
        n_ruined: count(Fate::Ruined),
        n_censored: count(Fate::Censored),
        n_liquidated: count(Fate::Liquidated),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn barrier(mu_star: Option<f64>, lower: f64, upper: f64) -> Boundaries {
        let mus: Vec<f64> = (0..11).map(|j| -2.0 + 0.4 * j as f64).collect();
        let n = mus.len();
        Boundaries {
            mus,
            lower: vec![Some(lower); n],
            upper: vec![Some(upper); n],
            mu_star,
            issuance_target: None,
            issuance_threshold: None,
            x_range: (0.0, 5.0),
            warnings: vec![],
        }
    }

    #[test]
    fn liquidation_start_pays_cash() {
        let m = ModelParams::ou_default();
        let b = barrier(Some(-1.0), 0.0, 1.0);
        let e = simulate_policy(&m, &b, (0.7, -1.2), &SimConfig::new(200, 1e-2, 10.0, 1)).unwrap();
        assert_eq!(e.mean, 0.7);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.n_liquidated, 200);
    }

    #[test]
    fn reproducible_and_lump_sum_consistent() {
        let m = ModelParams::ou_default();
        let b = barrier(Some(-1.5), 0.0, 0.4);
        let cfg = SimConfig::new(2000, 1e-2, 60.0, 7);
        let a = simulate_policy(&m, &b, (0.4, 0.15), &cfg).unwrap();
        let again = simulate_policy(&m, &b, (0.4, 0.15), &cfg).unwrap();
        assert_eq!(a, again);
        let above = simulate_policy(&m, &b, (0.9, 0.15), &cfg).unwrap();
        // same paths after the lump sum, so the difference is exactly the payment
        assert!((above.mean - a.mean - 0.5).abs() < 1e-12);
        assert!(a.n_ruined + a.n_censored <= a.n_paths);
    }

    #[test]
    fn antithetic_draws_agree_in_distribution() {
        let m = ModelParams::ou_default();
        let b = barrier(Some(-1.5), 0.0, 0.4);
        let mut cfg = SimConfig::new(4000, 1e-2, 60.0, 3);
        let a = simulate_policy(&m, &b, (0.3, 0.15), &cfg).unwrap();
        cfg.antithetic = true;
        let c = simulate_policy(&m, &b, (0.3, 0.15), &cfg).unwrap();
        assert!((a.mean - c.mean).abs() < 3.0 * (a.std_error.powi(2) + c.std_error.powi(2)).sqrt());
    }

    #[test]
    fn rejects_bad_configs() {
        let m = ModelParams::ou_default();
        let b = barrier(None, 0.0, 1.0);
        assert!(simulate_policy(&m, &b, (0.5, 0.0), &SimConfig::new(10, 1e-2, 10.0, 1)).is_err());
        assert!(simulate_policy(&m, &b, (0.5, 0.0), &SimConfig::new(100, 1e-2, 0.5, 1)).is_err());
        assert!(simulate_policy(&m, &b, (7.0, 0.0), &SimConfig::new(100, 1e-2, 10.0, 1)).is_err());
    }
}
