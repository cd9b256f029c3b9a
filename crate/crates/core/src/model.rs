//! Profitability dynamics and global model parameters.
//!
//! The cash reserves follow `dX = mu dt + sigma dW - dL` and the profitability
//! `mu` follows `d mu = kappa(mu) dt + sigma_tilde(mu) dW~`, with
//! `corr(dW, dW~) = rho`.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },
    #[error("profitability {mu} lies outside the drift domain [{lo}, {hi}]")]
    OutOfDomain { mu: f64, lo: f64, hi: f64 },
}

/// A closed interval, possibly unbounded on either side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn real_line() -> Self {
        Self::new(f64::NEG_INFINITY, f64::INFINITY)
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn is_interior(&self, v: f64) -> bool {
        v > self.lo && v < self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        other.lo >= self.lo && other.hi <= self.hi
    }
}

pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// User supplied drift and volatility of the profitability process.
#[derive(Clone)]
pub struct CustomDrift {
    pub kappa: ScalarFn,
    pub sigma_tilde: ScalarFn,
    pub domain: Interval,
}

impl fmt::Debug for CustomDrift {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomDrift").field("domain", &self.domain).finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum DriftSpec {
    /// `kappa(mu) = k (mu_bar - mu)`, constant `sigma_tilde`, domain the real line.
    OrnsteinUhlenbeck { k: f64, mu_bar: f64, sigma_tilde: f64 },
    /// `kappa(mu) = k (mu_bar - mu)`, `sigma_tilde(mu) = sigma_tilde sqrt(mu - a)`, domain `[a, inf)`.
    Cir { k: f64, mu_bar: f64, sigma_tilde: f64, a: f64 },
    Custom(CustomDrift),
}

impl DriftSpec {
    pub fn domain(&self) -> Interval {
        match self {
            DriftSpec::OrnsteinUhlenbeck { .. } => Interval::real_line(),
            DriftSpec::Cir { a, .. } => Interval::new(*a, f64::INFINITY),
            DriftSpec::Custom(c) => c.domain,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter { field, reason: format!("must be finite and > 0, got {v}") })
            }
        };
        let finite = |field: &'static str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(ModelError::InvalidParameter { field, reason: format!("must be finite, got {v}") })
            }
        };
        match *self {
            DriftSpec::OrnsteinUhlenbeck { k, mu_bar, sigma_tilde } => {
                positive("drift.k", k)?;
                finite("drift.mu_bar", mu_bar)?;
                positive("drift.sigma_tilde", sigma_tilde)
            }
            DriftSpec::Cir { k, mu_bar, sigma_tilde, a } => {
                positive("drift.k", k)?;
                finite("drift.mu_bar", mu_bar)?;
                positive("drift.sigma_tilde", sigma_tilde)?;
                finite("drift.a", a)
            }
            DriftSpec::Custom(ref c) => {
                if c.domain.lo < c.domain.hi && !c.domain.lo.is_nan() && !c.domain.hi.is_nan() {
                    Ok(())
                } else {
                    Err(ModelError::InvalidParameter {
                        field: "drift.domain",
                        reason: format!("empty interval [{}, {}]", c.domain.lo, c.domain.hi),
                    })
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub r: f64,
    pub sigma: f64,
    pub rho: f64,
    pub drift: DriftSpec,
}

impl ModelParams {
    pub fn new(r: f64, sigma: f64, rho: f64, drift: DriftSpec) -> Result<Self, ModelError> {
        let params = Self { r, sigma, rho, drift };
        params.validate()?;
        Ok(params)
    }

    /// Ornstein-Uhlenbeck model with the baseline parameters
    /// `r = 0.05, k = 0.5, mu_bar = 0.15, sigma_tilde = 0.3, sigma = 0.1, rho = 0`.
    pub fn ou_default() -> Self {
        Self {
            r: 0.05,
            sigma: 0.1,
            rho: 0.0,
            drift: DriftSpec::OrnsteinUhlenbeck { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3 },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.r.is_finite() && self.r > 0.0) {
            return Err(ModelError::InvalidParameter { field: "model.r", reason: format!("must be > 0, got {}", self.r) });
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(ModelError::InvalidParameter {
                field: "model.sigma",
                reason: format!("must be > 0, got {}", self.sigma),
            });
        }
        if !(-1.0..=1.0).contains(&self.rho) {
            return Err(ModelError::InvalidParameter {
                field: "model.rho",
                reason: format!("must lie in [-1, 1], got {}", self.rho),
            });
        }
        self.drift.validate()
    }

    pub fn domain(&self) -> Interval {
        self.drift.domain()
    }

    pub fn kappa(&self, mu: f64) -> Result<f64, ModelError> {
        self.check_domain(mu)?;
        Ok(self.kappa_unchecked(mu))
    }

    pub fn sigma_tilde(&self, mu: f64) -> Result<f64, ModelError> {
        self.check_domain(mu)?;
        Ok(self.sigma_tilde_unchecked(mu))
    }

    fn check_domain(&self, mu: f64) -> Result<(), ModelError> {
        let d = self.domain();
        if d.contains(mu) {
            Ok(())
        } else {
            Err(ModelError::OutOfDomain { mu, lo: d.lo, hi: d.hi })
        }
    }

    /// Drift of the profitability; the caller guarantees `mu` is in the domain.
    pub(crate) fn kappa_unchecked(&self, mu: f64) -> f64 {
        match self.drift {
            DriftSpec::OrnsteinUhlenbeck { k, mu_bar, .. } | DriftSpec::Cir { k, mu_bar, .. } => k * (mu_bar - mu),
            DriftSpec::Custom(ref c) => (c.kappa)(mu),
        }
    }

    pub(crate) fn sigma_tilde_unchecked(&self, mu: f64) -> f64 {
        match self.drift {
            DriftSpec::OrnsteinUhlenbeck { sigma_tilde, .. } => sigma_tilde,
            DriftSpec::Cir { sigma_tilde, a, .. } => sigma_tilde * (mu - a).max(0.0).sqrt(),
            DriftSpec::Custom(ref c) => (c.sigma_tilde)(mu),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    NotChecked,
}

#[derive(Debug, Clone, Serialize)]
pub struct AssumptionCheck {
    pub name: &'static str,
    pub status: CheckStatus,
    /// Sampled profitability values that triggered the check.
    pub offending: Vec<f64>,
    pub note: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != CheckStatus::Fail)
    }

    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Sampled proxies for the standing regularity assumptions on `kappa` and
/// `sigma_tilde`. The asymptotic conditions cannot be decided from a finite
/// sample, so these are heuristics evaluated at the ends of `interval`.
pub fn validate_assumptions(params: &ModelParams, interval: Interval, n_samples: usize) -> ValidationReport {
    let domain = params.domain();
    let n = n_samples.max(2);
    let lo = interval.lo.max(domain.lo);
    let hi = interval.hi.min(domain.hi);
    let samples: Vec<f64> = (0..n).map(|s| lo + (hi - lo) * s as f64 / (n - 1) as f64).collect();
    let mut checks = Vec::new();

    // -mu/kappa non-negative and bounded for large positive mu.
    let top = *samples.last().unwrap();
    let mut upper = AssumptionCheck {
        name: "mean_reversion_upper",
        status: CheckStatus::NotChecked,
        offending: vec![],
        note: String::new(),
    };
    if top > 0.0 {
        let ratio = -top / params.kappa_unchecked(top);
        if ratio.is_finite() && ratio >= 0.0 {
            upper.status = CheckStatus::Pass;
            upper.note = format!("-mu/kappa = {ratio:.6} at mu = {top}");
        } else {
            upper.status = CheckStatus::Fail;
            upper.offending.push(top);
            upper.note = format!("-mu/kappa = {ratio} at mu = {top}");
        }
    } else {
        upper.note = "interval has no positive profitability".into();
    }
    checks.push(upper);

    // -kappa/mu non-negative and bounded for large negative mu.
    let bottom = samples[0];
    let mut lower = AssumptionCheck {
        name: "mean_reversion_lower",
        status: CheckStatus::NotChecked,
        offending: vec![],
        note: String::new(),
    };
    if bottom < 0.0 {
        let ratio = -params.kappa_unchecked(bottom) / bottom;
        if ratio.is_finite() && ratio >= 0.0 {
            lower.status = CheckStatus::Pass;
            lower.note = format!("-kappa/mu = {ratio:.6} at mu = {bottom}");
        } else {
            lower.status = CheckStatus::Fail;
            lower.offending.push(bottom);
            lower.note = format!("-kappa/mu = {ratio} at mu = {bottom}");
        }
    } else {
        lower.note = "interval has no negative profitability".into();
    }
    checks.push(lower);

    // sigma_tilde^2 in O(mu): the ratio sigma_tilde^2/|mu| must not grow
    // between |mu|/2 and |mu| at either end.
    let mut growth = AssumptionCheck {
        name: "volatility_growth",
        status: CheckStatus::Pass,
        offending: vec![],
        note: String::new(),
    };
    for &end in &[bottom, top] {
        let half = 0.5 * end;
        if end.abs() < 1.0 || !domain.contains(half) {
            continue;
        }
        let s_end = params.sigma_tilde_unchecked(end);
        let s_half = params.sigma_tilde_unchecked(half);
        let r_end = s_end * s_end / end.abs();
        let r_half = s_half * s_half / half.abs();
        if !r_end.is_finite() || r_end > 1.5 * r_half + 1e-12 {
            growth.status = CheckStatus::Fail;
            growth.offending.push(end);
        }
    }
    checks.push(growth);

    // sigma_tilde > 0 on the interior; zeros on the domain boundary are
    // reported but allowed.
    let mut positivity = AssumptionCheck {
        name: "volatility_positive",
        status: CheckStatus::Pass,
        offending: vec![],
        note: String::new(),
    };
    for &mu in &samples {
        let s = params.sigma_tilde_unchecked(mu);
        if !(s > 0.0) {
            positivity.offending.push(mu);
            if domain.is_interior(mu) {
                positivity.status = CheckStatus::Fail;
            }
        }
    }
    if !positivity.offending.is_empty() && positivity.status == CheckStatus::Pass {
        positivity.note = "volatility vanishes only on the domain boundary".into();
    }
    checks.push(positivity);

    let boundary = match params.drift {
        DriftSpec::OrnsteinUhlenbeck { .. } => AssumptionCheck {
            name: "boundary_regularity",
            status: CheckStatus::Pass,
            offending: vec![],
            note: "unbounded domain".into(),
        },
        DriftSpec::Cir { .. } => AssumptionCheck {
            name: "boundary_regularity",
            status: CheckStatus::Pass,
            offending: vec![],
            note: "sigma_tilde^2 is affine, hence Lipschitz up to the boundary".into(),
        },
        DriftSpec::Custom(_) => AssumptionCheck {
            name: "boundary_regularity",
            status: CheckStatus::NotChecked,
            offending: vec![],
            note: "boundary conditions of a custom drift cannot be checked from samples".into(),
        },
    };
    checks.push(boundary);

    ValidationReport { checks }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou(sigma_tilde: f64) -> ModelParams {
        ModelParams::new(0.05, 0.1, 0.0, DriftSpec::OrnsteinUhlenbeck { k: 0.5, mu_bar: 0.15, sigma_tilde }).unwrap()
    }

    #[test]
    fn ou_drift_values() {
        let m = ou(0.3);
        assert_eq!(m.kappa(0.15).unwrap(), 0.0);
        assert!((m.kappa(0.0).unwrap() - 0.075).abs() < 1e-15);
    }

    #[test]
    fn cir_volatility_vanishes_at_a() {
        let m = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Cir { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3, a: -1.0 })
            .unwrap();
        assert!((m.kappa(-1.0).unwrap() - 0.575).abs() < 1e-15);
        assert_eq!(m.sigma_tilde(-1.0).unwrap(), 0.0);
        assert!(matches!(m.kappa(-1.5), Err(ModelError::OutOfDomain { .. })));
    }

    #[test]
    fn rejects_bad_parameters() {
        let d = DriftSpec::OrnsteinUhlenbeck { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3 };
        assert!(ModelParams::new(0.0, 0.1, 0.0, d.clone()).is_err());
        assert!(ModelParams::new(0.05, -0.1, 0.0, d.clone()).is_err());
        assert!(ModelParams::new(0.05, 0.1, 1.5, d).is_err());
        let bad = DriftSpec::OrnsteinUhlenbeck { k: -0.5, mu_bar: 0.15, sigma_tilde: 0.3 };
        let err = ModelParams::new(0.05, 0.1, 0.0, bad).unwrap_err();
        assert!(err.to_string().contains("drift.k"));
    }

    #[test]
    fn ou_defaults_satisfy_assumptions() {
        for st in [0.1, 0.3] {
            let rep = validate_assumptions(&ou(st), Interval::new(-3.0, 3.0), 100);
            assert!(rep.passed(), "{rep:?}");
            assert!(rep.checks.iter().all(|c| c.status == CheckStatus::Pass));
        }
    }

    #[test]
    fn constant_positive_drift_fails_mean_reversion() {
        let custom = CustomDrift {
            kappa: Arc::new(|_| 1.0),
            sigma_tilde: Arc::new(|_| 0.3),
            domain: Interval::real_line(),
        };
        let m = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Custom(custom)).unwrap();
        let rep = validate_assumptions(&m, Interval::new(-3.0, 3.0), 100);
        assert!(!rep.passed());
        let c = rep.check("mean_reversion_upper").unwrap();
        assert_eq!(c.status, CheckStatus::Fail);
        assert_eq!(c.offending, vec![3.0]);
        assert_eq!(rep.check("boundary_regularity").unwrap().status, CheckStatus::NotChecked);
    }

    #[test]
    fn cir_positivity_flags_only_boundary() {
        let m =
            ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Cir { k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3, a: 0.0 }).unwrap();
        let rep = validate_assumptions(&m, Interval::new(0.0, 3.0), 100);
        let c = rep.check("volatility_positive").unwrap();
        assert_eq!(c.offending, vec![0.0]);
        assert_eq!(c.status, CheckStatus::Pass);
    }

    #[test]
    fn quadratic_volatility_fails_growth() {
        let custom = CustomDrift {
            kappa: Arc::new(|mu| 0.5 * (0.15 - mu)),
            sigma_tilde: Arc::new(|mu: f64| 0.3 * (1.0 + mu.abs())),
            domain: Interval::real_line(),
        };
        let m = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::Custom(custom)).unwrap();
        let rep = validate_assumptions(&m, Interval::new(-20.0, 20.0), 50);
        assert_eq!(rep.check("volatility_growth").unwrap().status, CheckStatus::Fail);
    }

    proptest::proptest! {
        #[test]
        fn ou_drift_antisymmetric(d in -50.0f64..50.0, k in 0.01f64..5.0, mu_bar in -1.0f64..1.0) {
            let m = ModelParams::new(0.05, 0.1, 0.0, DriftSpec::OrnsteinUhlenbeck { k, mu_bar, sigma_tilde: 0.3 }).unwrap();
            let up = m.kappa(mu_bar + d).unwrap();
            let down = m.kappa(mu_bar - d).unwrap();
            proptest::prop_assert!((up + down).abs() <= 1e-12 * (1.0 + up.abs()));
            proptest::prop_assert_eq!(m.kappa(mu_bar + d).unwrap().to_bits(), up.to_bits());
        }
    }
}
