//! Run configuration, read from TOML.

use std::path::{Path, PathBuf};

use divopt::closed_form::DeterministicParams;
use divopt::extensions::{CreditLineSpec, IssuanceSpec, LowerCurve};
use divopt::grid::{Grid, GridSpec};
use divopt::linsolve::LinearSolverKind;
use divopt::model::{DriftSpec, ModelParams};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Base,
    ProportionalIssuance,
    FixedIssuance,
    CreditLine,
    Deterministic,
    Auxiliary,
    Mc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub drift: DriftSection,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub issuance: Option<IssuanceSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credit_line: Option<CreditLineSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mc: Option<McSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deterministic: Option<DeterministicSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auxiliary: Option<AuxiliarySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub r: f64,
    pub sigma: f64,
    pub rho: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { r: 0.05, sigma: 0.1, rho: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    #[default]
    Ou,
    Cir,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriftSection {
    #[serde(default)]
    pub kind: DriftKind,
    pub k: f64,
    pub mu_bar: f64,
    pub sigma_tilde: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

impl Default for DriftSection {
    fn default() -> Self {
        Self { kind: DriftKind::Ou, k: 0.5, mu_bar: 0.15, sigma_tilde: 0.3, a: None }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nx: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmu: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Auto {
    Auto,
}

/// Either a number or the keyword `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Penalty {
    Value(f64),
    Keyword(Auto),
}

impl Default for Penalty {
    fn default() -> Self {
        Self::Keyword(Auto::Auto)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(rename = "K", default)]
    pub k: Penalty,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_schedule: Option<Vec<f64>>,
    /// `C` in the gradient tolerance `C / K` used by the invariant report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps_constant: Option<f64>,
    #[serde(default)]
    pub linear: LinearSolverKind,
}

fn default_max_iter() -> usize {
    divopt::solver::DEFAULT_MAX_ITER
}

impl Default for SolverSection {
    fn default() -> Self {
        Self { k: Penalty::default(), tau: 0.0, max_iter: default_max_iter(), k_schedule: None, eps_constant: None, linear: LinearSolverKind::Direct }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_horizon: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    /// `[x, mu]` start points.
    #[serde(default = "default_points")]
    pub points: Vec<[f64; 2]>,
}

fn default_paths() -> usize {
    100_000
}

fn default_dt() -> f64 {
    1e-3
}

fn default_points() -> Vec<[f64; 2]> {
    vec![[0.5, 0.15]]
}

impl Default for McSection {
    fn default() -> Self {
        Self { n_paths: default_paths(), dt: default_dt(), t_horizon: None, seed: 0, antithetic: false, points: default_points() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeterministicSection {
    pub mu_min: f64,
    pub mu_max: f64,
    pub n: usize,
}

impl Default for DeterministicSection {
    fn default() -> Self {
        Self { mu_min: -2.0, mu_max: 0.0, n: 201 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxiliarySection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu_max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmu: Option<usize>,
    /// Penalization of the stopping obstacle; exact when omitted.
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: String,
    pub values: Vec<f64>,
}

pub const DEFAULT_NODES: usize = 300;

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Parse { message, .. } => CliError::Parse { path: path.to_path_buf(), message },
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Parse { path: PathBuf::from("<config>"), message: e.to_string() })?;
        cfg.check_sections()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    fn check_sections(&self) -> Result<(), CliError> {
        let issuance_mode = matches!(self.mode, Mode::ProportionalIssuance | Mode::FixedIssuance);
        if issuance_mode != self.issuance.is_some() {
            return Err(CliError::config("issuance", "section is required exactly when mode is an issuance mode"));
        }
        if (self.mode == Mode::CreditLine) != self.credit_line.is_some() {
            return Err(CliError::config("credit_line", "section is required exactly when mode = \"credit_line\""));
        }
        if self.drift.kind == DriftKind::Cir && self.drift.a.is_none() {
            return Err(CliError::config("drift.a", "required for the CIR drift"));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<ModelParams, CliError> {
        let d = &self.drift;
        let drift = match d.kind {
            DriftKind::Ou => DriftSpec::OrnsteinUhlenbeck { k: d.k, mu_bar: d.mu_bar, sigma_tilde: d.sigma_tilde },
            DriftKind::Cir => DriftSpec::Cir { k: d.k, mu_bar: d.mu_bar, sigma_tilde: d.sigma_tilde, a: d.a.unwrap_or_default() },
        };
        Ok(ModelParams::new(self.model.r, self.model.sigma, self.model.rho, drift)?)
    }

    pub fn grid_spec(&self, model: &ModelParams) -> GridSpec {
        let g = &self.grid;
        let nx = g.nx.unwrap_or(DEFAULT_NODES);
        let nmu = g.nmu.unwrap_or(DEFAULT_NODES);
        let mut spec = GridSpec::default_for(model, nx, nmu);
        if let Some(v) = g.x_max {
            spec.x_max = v;
        }
        if let Some(v) = g.mu_min {
            spec.mu_min = v;
        }
        if let Some(v) = g.mu_max {
            spec.mu_max = v;
        }
        spec.x_min = match (g.x_min, &self.credit_line) {
            (Some(v), _) => v,
            (None, Some(c)) if self.mode == Mode::CreditLine => match &c.x_lower {
                LowerCurve::Constant(v) => v.min(0.0),
                LowerCurve::Table(t) => t.iter().map(|p| p.1).fold(0.0, f64::min),
            },
            _ => 0.0,
        };
        spec
    }

    pub fn grid(&self, model: &ModelParams) -> Result<Grid, CliError> {
        Ok(Grid::build(self.grid_spec(model), model)?)
    }

    pub fn penalty(&self, grid: &Grid) -> Result<f64, CliError> {
        match self.solver.k {
            Penalty::Keyword(Auto::Auto) => Ok(divopt::solver::default_penalty(grid)),
            Penalty::Value(k) if k.is_finite() && k > 0.0 => Ok(k),
            Penalty::Value(k) => Err(CliError::config("solver.K", format!("must be > 0 or \"auto\", got {k}"))),
        }
    }

    pub fn deterministic_params(&self) -> Result<DeterministicParams, CliError> {
        if self.drift.kind != DriftKind::Ou {
            return Err(CliError::config("drift.kind", "the deterministic closed form needs an OU drift"));
        }
        DeterministicParams::new(self.model.r, self.drift.k, self.drift.mu_bar).map_err(|e| CliError::config("drift", e.to_string()))
    }

    /// Applies a sweep value to the named parameter.
    pub fn with_parameter(&self, name: &str, value: f64) -> Result<Self, CliError> {
        let mut c = self.clone();
        match name {
            "k" => c.drift.k = value,
            "mu_bar" => c.drift.mu_bar = value,
            "sigma_tilde" => c.drift.sigma_tilde = value,
            "sigma" => c.model.sigma = value,
            "rho" => c.model.rho = value,
            other => {
                return Err(CliError::config(
                    "sweep.parameter",
                    format!("unknown parameter `{other}`; expected one of k, mu_bar, sigma_tilde, sigma, rho"),
                ))
            }
        }
        Ok(c)
    }
}
