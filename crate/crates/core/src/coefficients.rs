//! Coefficient processes `B`, `C`, `S`, the final datum `M`, and the
//! Brownian driver.
//!
//! Random coefficients depend on the driver only through its current value
//! `W_t`, which keeps conditional expectations one-dimensional.

use std::borrow::Cow;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::spectral::{matrix_norm, min_eigenvalue, op_norm, Norm, SpectralBasis, DEFAULT_PSD_TOL};
use crate::stats::{gauss_hermite_normal, gauss_legendre};

/// Uniform grid `0 = t_0 < … < t_L = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeGrid {
    t_final: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_final: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("time grid needs at least one step".into()));
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "horizon T = {t_final} must be positive and finite"
            )));
        }
        Ok(Self { t_final, steps })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn h(&self) -> f64 {
        self.t_final / self.steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.steps {
            self.t_final
        } else {
            i as f64 * self.h()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.time(i)).collect()
    }

    /// Grid index of `t`, if `t` is a grid time up to relative rounding.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let x = t / self.h();
        let i = x.round();
        if i < 0.0 || i > self.steps as f64 || (x - i).abs() > 1e-9 {
            None
        } else {
            Some(i as usize)
        }
    }

    /// Grid with the same horizon and `factor` times as many steps.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            t_final: self.t_final,
            steps: self.steps * factor,
        }
    }
}

/// Counter-based stream derivation: every purpose gets its own key from the
/// master seed through one splitmix64 round.
pub fn derive_seed(master: u64, purpose: u64) -> u64 {
    let mut z = master ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream purposes used by the solvers and the verification harness.
pub mod streams {
    pub const SOLVER: u64 = 1;
    pub const VERIFY: u64 = 2;
    pub const SIMULATE: u64 = 3;
    pub const CHALLENGER: u64 = 4;
    pub const AUDIT: u64 = 5;
}

/// One sampled Brownian path on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    grid: TimeGrid,
    increments: Vec<f64>,
    values: Vec<f64>,
    seed: u64,
    index: u64,
}

/// The part of a path visible at step `i`: `W_{t_0}, …, W_{t_i}`.
#[derive(Debug, Clone, Copy)]
pub struct PathPrefix<'a> {
    step: usize,
    time: f64,
    values: &'a [f64],
}

impl PathPrefix<'_> {
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn current(&self) -> f64 {
        self.values[self.step]
    }

    pub fn history(&self) -> &[f64] {
        self.values
    }
}

impl BrownianPath {
    /// Path `index` of the stream keyed by `seed`.
    pub fn sample(grid: TimeGrid, seed: u64, index: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);
        let sd = grid.h().sqrt();
        let increments: Vec<f64> = (0..grid.steps())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                sd * z
            })
            .collect();
        Self::from_increments_tagged(grid, increments, seed, index)
    }

    pub fn from_increments(grid: TimeGrid, increments: Vec<f64>) -> Result<Self> {
        if increments.len() != grid.steps() {
            return Err(Error::ContractViolation(format!(
                "{} increments for a grid with {} steps",
                increments.len(),
                grid.steps()
            )));
        }
        Ok(Self::from_increments_tagged(grid, increments, 0, 0))
    }

    fn from_increments_tagged(grid: TimeGrid, increments: Vec<f64>, seed: u64, index: u64) -> Self {
        let mut values = Vec::with_capacity(increments.len() + 1);
        values.push(0.0);
        let mut w = 0.0;
        for dw in &increments {
            w += dw;
            values.push(w);
        }
        Self {
            grid,
            increments,
            values,
            seed,
            index,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn index(&self) -> u64 {
        self.index
    }

    pub fn w(&self, i: usize) -> f64 {
        self.values[i]
    }

    pub fn dw(&self, i: usize) -> f64 {
        self.increments[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn prefix(&self, i: usize) -> PathPrefix<'_> {
        PathPrefix {
            step: i,
            time: self.grid.time(i),
            values: &self.values[..=i],
        }
    }

    /// The same Brownian path observed on a grid `factor` times coarser.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.grid.steps() % factor != 0 {
            return Err(Error::InvalidConfig(format!(
                "cannot coarsen {} steps by a factor {factor}",
                self.grid.steps()
            )));
        }
        let grid = TimeGrid::new(self.grid.t_final(), self.grid.steps() / factor)?;
        let increments = (0..grid.steps())
            .map(|i| self.values[(i + 1) * factor] - self.values[i * factor])
            .collect();
        let mut p = Self::from_increments_tagged(grid, increments, self.seed, self.index);
        // keep the endpoint values bitwise identical to the fine path
        for i in 0..=grid.steps() {
            p.values[i] = self.values[i * factor];
        }
        Ok(p)
    }
}

/// Samples `n_paths` independent paths; path `j` depends only on `(seed, j)`.
pub fn sample_paths(grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<Vec<BrownianPath>> {
    if n_paths == 0 {
        return Err(Error::InvalidConfig("need at least one path".into()));
    }
    if grid.steps() == 0 || !(grid.h() > 0.0) {
        return Err(Error::InvalidConfig("zero-length time grid".into()));
    }
    let grid = *grid;
    Ok((0..n_paths as u64)
        .into_par_iter()
        .map(|j| BrownianPath::sample(grid, seed, j))
        .collect())
}

/// Declared almost-sure bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bounds {
    pub m_c: f64,
    pub m_b: f64,
    /// Operator-norm bound on `S`, when `S` is known to be bounded.
    pub m_s: Option<f64>,
}

/// One breakpoint of a piecewise-constant deterministic schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScheduleKnot {
    pub t: f64,
    pub c: Vec<f64>,
    pub b: Vec<f64>,
    pub s: Vec<f64>,
}

/// The running cost weight of a random-field model.
#[derive(Debug, Clone, PartialEq)]
pub enum SourceField {
    /// `S(t) = s(t, W_t) · I`.
    Scalar(Expr),
    /// Multiplication by `H(t, W_t, x)` on `L²(0, π)`, projected on the sine basis.
    Multiplication(Expr),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    ConstantDiagonal {
        c: Vec<f64>,
        b: Vec<f64>,
        s: Vec<f64>,
        m: Vec<f64>,
    },
    DeterministicSchedule {
        knots: Vec<ScheduleKnot>,
        m: Vec<f64>,
    },
    ScalarRandomField {
        c: Expr,
        b: Expr,
        s: SourceField,
        m: Vec<f64>,
    },
}

/// Coefficients evaluated at one `(t, W_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients {
    pub c: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct Galerkin {
    nodes: Vec<f64>,
    /// `sqrt(w_q) e_k(x_q)`, one row per node.
    weighted_modes: DMatrix<f64>,
}

impl Galerkin {
    fn new(n: usize) -> Self {
        let nq = (8 * n).max(96);
        let (x, w) = gauss_legendre(nq, 0.0, std::f64::consts::PI);
        let norm = (2.0 / std::f64::consts::PI).sqrt();
        let weighted_modes = DMatrix::from_fn(nq, n, |q, k| {
            w[q].sqrt() * norm * (((k + 1) as f64) * x[q]).sin()
        });
        Self { nodes: x, weighted_modes }
    }

    fn project(&self, field: &Expr, t: f64, w: f64) -> DMatrix<f64> {
        let e = &self.weighted_modes;
        let n = e.ncols();
        let vals: Vec<f64> = self.nodes.iter().map(|x| field.eval(t, w, *x)).collect();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j..n {
                let mut acc = 0.0;
                for (q, v) in vals.iter().enumerate() {
                    acc += v * e[(q, j)] * e[(q, k)];
                }
                out[(j, k)] = acc;
                out[(k, j)] = acc;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct CachedStep {
    coeffs: Coefficients,
    op_c: f64,
    op_b: f64,
    op_s: f64,
}

/// A coefficient model on a fixed basis and time grid.
#[derive(Debug, Clone)]
pub struct CoefficientModel {
    basis: Arc<SpectralBasis>,
    grid: TimeGrid,
    kind: ModelKind,
    bounds: Bounds,
    cache: Option<Vec<CachedStep>>,
    galerkin: Option<Galerkin>,
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(Error::InvalidConfig(format!(
            "{name} has {} entries, expected N = {n}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} has non-finite entries")));
    }
    Ok(())
}

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(v))
}

impl CoefficientModel {
    pub fn new(basis: Arc<SpectralBasis>, grid: TimeGrid, kind: ModelKind, bounds: Bounds) -> Result<Self> {
        let n = basis.n();
        if !(bounds.m_c > 0.0) || !(bounds.m_b > 0.0) {
            return Err(Error::InvalidConfig("bounds M_C and M_B must be positive".into()));
        }
        match &kind {
            ModelKind::ConstantDiagonal { c, b, s, m } => {
                check_len("c", c, n)?;
                check_len("b", b, n)?;
                check_len("s", s, n)?;
                check_len("m", m, n)?;
            }
            ModelKind::DeterministicSchedule { knots, m } => {
                check_len("m", m, n)?;
                if knots.is_empty() {
                    return Err(Error::InvalidConfig("schedule needs at least one knot".into()));
                }
                if knots[0].t > 0.0 {
                    return Err(Error::InvalidConfig("first schedule knot must be at t = 0".into()));
                }
                if knots.windows(2).any(|w| w[1].t <= w[0].t) {
                    return Err(Error::InvalidConfig("schedule knots must be strictly increasing in t".into()));
                }
                for k in knots {
                    check_len("schedule c", &k.c, n)?;
                    check_len("schedule b", &k.b, n)?;
                    check_len("schedule s", &k.s, n)?;
                }
            }
            ModelKind::ScalarRandomField { c, b, s, m } => {
                check_len("m", m, n)?;
                if c.uses_x() || b.uses_x() {
                    return Err(Error::InvalidConfig("c and b fields may not depend on x".into()));
                }
                if let SourceField::Scalar(e) = s {
                    if e.uses_x() {
                        return Err(Error::InvalidConfig(
                            "a scalar source may not depend on x; use a multiplication source".into(),
                        ));
                    }
                }
            }
        }
        let galerkin = match &kind {
            ModelKind::ScalarRandomField { s: SourceField::Multiplication(_), .. } => Some(Galerkin::new(n)),
            _ => None,
        };
        let mut model = Self {
            basis,
            grid,
            kind,
            bounds,
            cache: None,
            galerkin,
        };
        if model.is_deterministic() {
            let steps = (0..=grid.steps())
                .map(|i| {
                    let coeffs = model.compute(i, 0.0);
                    CachedStep {
                        op_c: op_norm(&coeffs.c),
                        op_b: op_norm(&coeffs.b),
                        op_s: op_norm(&coeffs.s),
                        coeffs,
                    }
                })
                .collect();
            model.cache = Some(steps);
        }
        Ok(model)
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn bounds(&self) -> &Bounds {
        &self.bounds
    }

    /// Same coefficients on another grid with the same horizon.
    pub fn with_grid(&self, grid: TimeGrid) -> Result<Self> {
        Self::new(self.basis.clone(), grid, self.kind.clone(), self.bounds)
    }

    /// True when no coefficient depends on the Brownian driver.
    pub fn is_deterministic(&self) -> bool {
        match &self.kind {
            ModelKind::ConstantDiagonal { .. } | ModelKind::DeterministicSchedule { .. } => true,
            ModelKind::ScalarRandomField { c, b, s, .. } => {
                let s_w = match s {
                    SourceField::Scalar(e) | SourceField::Multiplication(e) => e.uses_w(),
                };
                !c.uses_w() && !b.uses_w() && !s_w
            }
        }
    }

    /// True when `C` does not depend on the driver (it may depend on time).
    pub fn c_is_deterministic(&self) -> bool {
        match &self.kind {
            ModelKind::ScalarRandomField { c, .. } => !c.uses_w(),
            _ => true,
        }
    }

    pub fn final_datum(&self) -> DMatrix<f64> {
        match &self.kind {
            ModelKind::ConstantDiagonal { m, .. }
            | ModelKind::DeterministicSchedule { m, .. }
            | ModelKind::ScalarRandomField { m, .. } => diag(m),
        }
    }

    fn compute(&self, i: usize, w: f64) -> Coefficients {
        let n = self.basis.n();
        let t = self.grid.time(i);
        match &self.kind {
            ModelKind::ConstantDiagonal { c, b, s, .. } => Coefficients {
                c: diag(c),
                b: diag(b),
                s: diag(s),
            },
            ModelKind::DeterministicSchedule { knots, .. } => {
                let knot = knots
                    .iter()
                    .rev()
                    .find(|k| k.t <= t + 1e-12 * self.grid.t_final())
                    .unwrap_or(&knots[0]);
                Coefficients {
                    c: diag(&knot.c),
                    b: diag(&knot.b),
                    s: diag(&knot.s),
                }
            }
            ModelKind::ScalarRandomField { c, b, s, .. } => {
                let id = DMatrix::<f64>::identity(n, n);
                let s = match s {
                    SourceField::Scalar(e) => &id * e.eval(t, w, 0.0),
                    SourceField::Multiplication(e) => self
                        .galerkin
                        .as_ref()
                        .expect("galerkin rule for multiplication source")
                        .project(e, t, w),
                };
                Coefficients {
                    c: &id * c.eval(t, w, 0.0),
                    b: &id * b.eval(t, w, 0.0),
                    s,
                }
            }
        }
    }

    /// Coefficients at grid step `i` with driver value `w`, with the bound
    /// checks of the model. Deterministic models ignore `w`.
    pub fn at(&self, i: usize, w: f64) -> Result<Cow<'_, Coefficients>> {
        let t = self.grid.time(i);
        if let Some(cache) = &self.cache {
            let step = &cache[i];
            self.check_bounds(t, step.op_c, step.op_b, step.op_s)?;
            return Ok(Cow::Borrowed(&step.coeffs));
        }
        let coeffs = self.compute(i, w);
        let (op_c, op_b) = match &self.kind {
            ModelKind::ScalarRandomField { .. } => (coeffs.c[(0, 0)].abs(), coeffs.b[(0, 0)].abs()),
            _ => (op_norm(&coeffs.c), op_norm(&coeffs.b)),
        };
        let op_s = match (&self.kind, self.bounds.m_s) {
            (_, None) => 0.0,
            (ModelKind::ScalarRandomField { s: SourceField::Scalar(_), .. }, _) => coeffs.s[(0, 0)].abs(),
            _ => op_norm(&coeffs.s),
        };
        self.check_bounds(t, op_c, op_b, op_s)?;
        Ok(Cow::Owned(coeffs))
    }

    fn check_bounds(&self, t: f64, op_c: f64, op_b: f64, op_s: f64) -> Result<()> {
        if !(op_c <= self.bounds.m_c) {
            return Err(Error::BoundViolation {
                quantity: "|C|_L(H)".into(),
                value: op_c,
                bound: self.bounds.m_c,
                time: t,
            });
        }
        if !(op_b <= self.bounds.m_b) {
            return Err(Error::BoundViolation {
                quantity: "|B|_L(U,H)".into(),
                value: op_b,
                bound: self.bounds.m_b,
                time: t,
            });
        }
        if let Some(m_s) = self.bounds.m_s {
            if !(op_s <= m_s) {
                return Err(Error::BoundViolation {
                    quantity: "|S|_L(H)".into(),
                    value: op_s,
                    bound: m_s,
                    time: t,
                });
            }
        }
        Ok(())
    }

    /// Diagonal of `C` at step `i` for models with deterministic diagonal `C`.
    pub fn c_diagonal(&self, i: usize) -> Option<Vec<f64>> {
        if !self.c_is_deterministic() {
            return None;
        }
        let c = self.compute(i, 0.0).c;
        Some(c.diagonal().iter().copied().collect())
    }

    /// Driver values at which random coefficients are probed by audits:
    /// Gauss–Hermite nodes of the law of `W_t`.
    pub fn probe_points(&self, i: usize) -> Vec<f64> {
        if self.is_deterministic() || i == 0 {
            return vec![0.0];
        }
        let sd = self.grid.time(i).sqrt();
        gauss_hermite_normal(7).0.into_iter().map(|z| z * sd).collect()
    }
}

/// Evaluates the coefficients at grid step `i` along `path`. Only the path
/// prefix up to `t_i` is consulted.
pub fn eval_coefficients(model: &CoefficientModel, prefix: PathPrefix<'_>) -> Result<Coefficients> {
    Ok(model.at(prefix.step(), prefix.current())?.into_owned())
}

/// Hypothesis report of a model.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub bounds: Bounds,
    pub observed_sup_c: f64,
    pub observed_sup_b: f64,
    pub observed_sup_s: f64,
    pub observed_sup_s_k_norm: f64,
    pub s_symmetric: bool,
    pub s_psd: bool,
    pub m_psd: bool,
    pub s_bounded: bool,
    pub a2: bool,
    pub a3: bool,
    pub a3_prime: bool,
    pub a4: bool,
    pub messages: Vec<String>,
}

/// Checks declared bounds and the positivity and regularity hypotheses on
/// every grid time (and on probe values of the driver for random models).
pub fn validate_model(model: &CoefficientModel) -> ValidationReport {
    let basis = model.basis();
    let mut sup_c = 0.0_f64;
    let mut sup_b = 0.0_f64;
    let mut sup_s = 0.0_f64;
    let mut sup_sk = 0.0_f64;
    let mut s_sym = true;
    let mut s_psd = true;
    let mut s_k_finite = true;
    for i in 0..=model.grid().steps() {
        for w in model.probe_points(i) {
            let c = model.compute(i, w);
            sup_c = sup_c.max(op_norm(&c.c));
            sup_b = sup_b.max(op_norm(&c.b));
            let sk = matrix_norm(basis, &c.s, Norm::K);
            if !sk.is_finite() {
                s_k_finite = false;
            } else {
                sup_sk = sup_sk.max(sk);
                sup_s = sup_s.max(op_norm(&c.s));
            }
            if (&c.s - c.s.transpose()).amax() > 0.0 {
                s_sym = false;
            }
            if sk.is_finite() && min_eigenvalue(&c.s) < -DEFAULT_PSD_TOL {
                s_psd = false;
            }
        }
    }
    let m = model.final_datum();
    let m_psd = min_eigenvalue(&m) >= -DEFAULT_PSD_TOL;
    let b = model.bounds();
    let s_bounded = match model.kind() {
        ModelKind::ConstantDiagonal { .. } | ModelKind::DeterministicSchedule { .. } => true,
        ModelKind::ScalarRandomField { s, .. } => match (s, b.m_s) {
            (_, Some(ms)) => sup_s <= ms,
            (SourceField::Scalar(e), None) => e.as_constant().is_some(),
            (SourceField::Multiplication(e), None) => !e.uses_x() && !e.uses_w(),
        },
    };
    let a2 = sup_c <= b.m_c;
    let a4 = sup_b <= b.m_b;
    let a3 = s_sym && s_psd && m_psd && s_bounded;
    let a3_prime = s_sym && s_k_finite;
    let mut messages = Vec::new();
    messages.push(if a2 { "A2 satisfied".to_string() } else { format!("A2 violated: sup |C| = {sup_c:.4e} > M_C") });
    messages.push(if a4 { "A4 satisfied".to_string() } else { format!("A4 violated: sup |B| = {sup_b:.4e} > M_B") });
    if a3 {
        messages.push("A3 satisfied".into());
    } else {
        if !m_psd {
            messages.push("A3 violated: M not PSD".into());
        }
        if !s_psd {
            messages.push("A3 violated: S not PSD".into());
        }
        if !s_bounded {
            messages.push("A3 violated: S not bounded in L(H)".into());
        }
        if !s_sym {
            messages.push("A3 violated: S not symmetric".into());
        }
    }
    messages.push(if a3_prime {
        "A3' satisfied".to_string()
    } else {
        "A3' violated: S has infinite K-norm".to_string()
    });
    ValidationReport {
        bounds: *b,
        observed_sup_c: sup_c,
        observed_sup_b: sup_b,
        observed_sup_s: sup_s,
        observed_sup_s_k_norm: sup_sk,
        s_symmetric: s_sym,
        s_psd,
        m_psd,
        s_bounded,
        a2,
        a3,
        a3_prime,
        a4,
        messages,
    }
}
