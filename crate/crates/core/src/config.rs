//! Experiment configuration read from TOML.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::coefficients::{Bounds, CoefficientModel, ModelKind, ScheduleKnot, SourceField, TimeGrid};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::lyapunov::{Backend, PicardConfig, SolverSettings, DEFAULT_MAX_ITER, DEFAULT_TOL, MAX_HALVINGS};
use crate::regression::{RegressionConfig, DEFAULT_DEGREE, DEFAULT_RIDGE};
use crate::riccati::RiccatiConfig;
use crate::spectral::{laplacian_basis, DEFAULT_PSD_TOL, DEFAULT_RHO};

/// Smallest ensemble accepted for second-moment and value estimates.
pub const MIN_AUDIT_PATHS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default = "default_budget")]
    pub memory_budget_mb: f64,
    pub model: ModelSpec,
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub verify: VerifySpec,
    #[serde(default)]
    pub simulate: SimulateSpec,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_budget() -> f64 {
    2048.0
}

/// A per-mode array, or one value for every mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerMode {
    Uniform(f64),
    Modes(Vec<f64>),
}

impl PerMode {
    pub fn expand(&self, n: usize, what: &str) -> Result<Vec<f64>> {
        match self {
            PerMode::Uniform(v) => Ok(vec![*v; n]),
            PerMode::Modes(v) if v.len() == n => Ok(v.clone()),
            PerMode::Modes(v) => Err(Error::InvalidConfig(format!(
                "{what} has {} entries but the basis has {n} modes",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n: usize,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub m: PerMode,
    pub bounds: BoundsSpec,
    pub coefficients: CoefficientSpec,
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSpec {
    pub m_c: f64,
    pub m_b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum CoefficientSpec {
    ConstantDiagonal {
        c: PerMode,
        b: PerMode,
        s: PerMode,
    },
    DeterministicSchedule {
        knots: Vec<KnotSpec>,
    },
    ScalarRandomField {
        c: String,
        b: String,
        s: String,
        #[serde(default)]
        source: SourceKind,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KnotSpec {
    pub t: f64,
    pub c: PerMode,
    pub b: PerMode,
    pub s: PerMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceKind {
    #[default]
    Scalar,
    Multiplication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub t_final: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSpec {
    pub backend: Backend,
    pub n_paths: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    pub regression_degree: usize,
    pub ridge: f64,
    pub psd_tol: f64,
    pub c2_safety: f64,
    pub c2_paths: usize,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let ric = RiccatiConfig::default();
        Self {
            backend: Backend::DeterministicExact,
            n_paths: 2000,
            delta: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            max_halvings: MAX_HALVINGS,
            r: None,
            regression_degree: DEFAULT_DEGREE,
            ridge: DEFAULT_RIDGE,
            psd_tol: DEFAULT_PSD_TOL,
            c2_safety: ric.c2_safety,
            c2_paths: ric.c2_paths,
        }
    }
}

/// Audits run by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Audit {
    Validate,
    Smoothing,
    KNormIdentity,
    JnProperties,
    Lyapunov,
    Riccati,
    Oracle,
    Moments,
    Value,
    Probe,
    Completion,
    Homogeneity,
    Apriori,
    JnStability,
    KNormBound,
    WeakSource,
}

impl Audit {
    pub const ALL: [Audit; 16] = [
        Audit::Validate,
        Audit::Smoothing,
        Audit::KNormIdentity,
        Audit::JnProperties,
        Audit::Lyapunov,
        Audit::Riccati,
        Audit::Oracle,
        Audit::Moments,
        Audit::Value,
        Audit::Probe,
        Audit::Completion,
        Audit::Homogeneity,
        Audit::Apriori,
        Audit::JnStability,
        Audit::KNormBound,
        Audit::WeakSource,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySpec {
    pub audits: Vec<Audit>,
    /// Initial state; the first basis vector when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<PerMode>,
    pub n_paths: usize,
    pub moment_paths: usize,
    pub challenger_seeds: Vec<u64>,
    pub challenger_amplitude: f64,
    pub jn_ns: Vec<f64>,
    pub jn_epsilon: f64,
    /// Window of the `J_n` comparison; the whole horizon when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jn_delta: Option<f64>,
    pub jn_tolerance: f64,
    pub apriori_deltas: Vec<f64>,
    pub k_norm_paths: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            audits: Audit::ALL.to_vec(),
            x: None,
            n_paths: 10_000,
            moment_paths: MIN_AUDIT_PATHS,
            challenger_seeds: vec![1],
            challenger_amplitude: 0.5,
            jn_ns: vec![4.0, 16.0, 64.0, 256.0],
            jn_epsilon: 0.0,
            jn_delta: None,
            jn_tolerance: 1.0,
            apriori_deltas: vec![0.25, 0.5, 1.0],
            k_norm_paths: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    #[default]
    Feedback,
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSpec {
    pub n_paths: usize,
    pub policy: PolicyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x: Option<PerMode>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            n_paths: 4,
            policy: PolicyKind::Feedback,
            x: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    pub dir: PathBuf,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

impl ExperimentConfig {
    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.n == 0 {
            return Err(Error::InvalidConfig("model.n must be at least 1".into()));
        }
        if !(m.rho > 0.25 && m.rho < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "model.rho = {} must lie in the open interval (1/4, 1/2)",
                m.rho
            )));
        }
        if !(self.grid.t_final > 0.0) || self.grid.steps == 0 {
            return Err(Error::InvalidConfig("grid needs t_final > 0 and steps ≥ 1".into()));
        }
        let s = &self.solver;
        if !(s.tol > 0.0) || s.max_iter == 0 {
            return Err(Error::InvalidConfig("solver.tol must be positive and max_iter ≥ 1".into()));
        }
        if let Some(d) = s.delta {
            if !(d > 0.0) {
                return Err(Error::InvalidConfig("solver.delta must be positive".into()));
            }
        }
        if let Some(r) = s.r {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig("solver.r must be positive".into()));
            }
        }
        if !(s.ridge >= 0.0) || !(s.psd_tol >= 0.0) || !(s.c2_safety >= 1.0) {
            return Err(Error::InvalidConfig(
                "solver.ridge and solver.psd_tol must be nonnegative and c2_safety ≥ 1".into(),
            ));
        }
        if s.backend == Backend::MonteCarlo && s.n_paths <= s.regression_degree {
            return Err(Error::InvalidConfig(format!(
                "solver.n_paths = {} is too small for regression degree {}",
                s.n_paths, s.regression_degree
            )));
        }
        let v = &self.verify;
        if v.n_paths < MIN_AUDIT_PATHS || v.moment_paths < MIN_AUDIT_PATHS {
            return Err(Error::InvalidConfig(format!(
                "verify.n_paths and verify.moment_paths must be at least {MIN_AUDIT_PATHS}"
            )));
        }
        if v.jn_ns.is_empty() || v.jn_ns.iter().any(|n| !(*n > 0.0)) {
            return Err(Error::InvalidConfig("verify.jn_ns must be nonempty and positive".into()));
        }
        if v.apriori_deltas.iter().any(|d| !(*d > 0.0)) {
            return Err(Error::InvalidConfig("verify.apriori_deltas must be positive".into()));
        }
        if self.simulate.n_paths == 0 {
            return Err(Error::InvalidConfig("simulate.n_paths must be at least 1".into()));
        }
        if let Some(w) = self.workers {
            if w == 0 {
                return Err(Error::InvalidConfig("workers must be at least 1".into()));
            }
        }
        if !(self.memory_budget_mb > 0.0) {
            return Err(Error::InvalidConfig("memory_budget_mb must be positive".into()));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t_final, self.grid.steps)
    }

    pub fn build_model(&self) -> Result<CoefficientModel> {
        let spec = &self.model;
        let n = spec.n;
        let basis = Arc::new(laplacian_basis(n, spec.rho)?);
        let m = spec.m.expand(n, "model.m")?;
        let kind = match &spec.coefficients {
            CoefficientSpec::ConstantDiagonal { c, b, s } => ModelKind::ConstantDiagonal {
                c: c.expand(n, "c")?,
                b: b.expand(n, "b")?,
                s: s.expand(n, "s")?,
                m,
            },
            CoefficientSpec::DeterministicSchedule { knots } => ModelKind::DeterministicSchedule {
                knots: knots
                    .iter()
                    .map(|k| {
                        Ok(ScheduleKnot {
                            t: k.t,
                            c: k.c.expand(n, "knot c")?,
                            b: k.b.expand(n, "knot b")?,
                            s: k.s.expand(n, "knot s")?,
                        })
                    })
                    .collect::<Result<_>>()?,
                m,
            },
            CoefficientSpec::ScalarRandomField { c, b, s, source } => {
                let s = Expr::parse(s)?;
                ModelKind::ScalarRandomField {
                    c: Expr::parse(c)?,
                    b: Expr::parse(b)?,
                    s: match source {
                        SourceKind::Scalar => SourceField::Scalar(s),
                        SourceKind::Multiplication => SourceField::Multiplication(s),
                    },
                    m,
                }
            }
        };
        let bounds = Bounds {
            m_c: spec.bounds.m_c,
            m_b: spec.bounds.m_b,
            m_s: spec.bounds.m_s,
        };
        CoefficientModel::new(basis, self.time_grid()?, kind, bounds)
    }

    pub fn solver_settings(&self) -> SolverSettings {
        let s = &self.solver;
        SolverSettings {
            backend: s.backend,
            n_paths: s.n_paths,
            seed: self.seed,
            regression: RegressionConfig {
                degree: s.regression_degree,
                ridge: s.ridge,
            },
            psd_tol: s.psd_tol,
        }
    }

    pub fn picard_config(&self) -> PicardConfig {
        let s = &self.solver;
        PicardConfig {
            delta: s.delta,
            tol: s.tol,
            max_iter: s.max_iter,
            max_halvings: s.max_halvings,
        }
    }

    pub fn riccati_config(&self) -> RiccatiConfig {
        let s = &self.solver;
        RiccatiConfig {
            r: s.r,
            delta: s.delta,
            tol: s.tol,
            max_iter: s.max_iter,
            max_halvings: s.max_halvings,
            c2_safety: s.c2_safety,
            c2_paths: s.c2_paths,
        }
    }

    /// The configured initial state, defaulting to the first basis vector.
    pub fn initial_state(&self, x: Option<&PerMode>) -> Result<DVector<f64>> {
        let n = self.model.n;
        match x {
            Some(x) => Ok(DVector::from_vec(x.expand(n, "x")?)),
            None => Ok(DVector::from_fn(n, |k, _| if k == 0 { 1.0 } else { 0.0 })),
        }
    }
}
