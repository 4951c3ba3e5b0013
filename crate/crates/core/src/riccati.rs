//! Backward stochastic Riccati equation
//!
//! ```text
//! -dP = (A'P + PA + C'PC + C'Q + QC + S - PBB'P) dt - Q dW,   P(T) = M,
//! ```
//!
//! solved window by window as the fixed point of `Λ`, where `Λ(K)` is the
//! Lyapunov solution with source `S - KBB'K`, on the ball
//! `B(r) = {sup |P| ≤ r}`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::coefficients::{derive_seed, streams, CoefficientModel, Coefficients};
use crate::error::{Error, Result};
use crate::flow::flow_second_moment_sup;
use crate::lyapunov::{
    audit_nodes, effective_regression, exact_linear, extract_q_window, iterate_window, mc_representation,
    paste_windows, ratios_of, solver_paths, sup_distance, Backend, BackwardSolution, SolveMeta, SolverSettings,
    WindowOutcome, DEFAULT_MAX_ITER, DEFAULT_TOL, MAX_HALVINGS,
};
use crate::regression::Surface;
use crate::spectral::{op_norm, repair_psd};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiConfig {
    /// Ball radius; `None` selects twice the Lyapunov bound.
    pub r: Option<f64>,
    /// Window length; `None` selects the largest admissible window.
    pub delta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Multiplier applied to the measured flow moment bound.
    pub c2_safety: f64,
    /// Paths used to measure the flow moment bound of random models.
    pub c2_paths: usize,
}

impl Default for RiccatiConfig {
    fn default() -> Self {
        Self {
            r: None,
            delta: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            max_halvings: MAX_HALVINGS,
            c2_safety: 2.0,
            c2_paths: 2000,
        }
    }
}

/// Constants of the ball construction as used by the solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiccatiParameters {
    pub c2: f64,
    pub m_norm: f64,
    pub s_sup: f64,
    /// `C₂²|M| + 2C₂²T sup|S|`.
    pub lyapunov_bound: f64,
    pub radius: f64,
    /// `(r - bound) / (C₂² M_B² r²)`.
    pub delta_limit: f64,
    pub delta: f64,
}

/// `max(1, sup_s λ_max E[Φ(0→s)'Φ(0→s)])`.
pub fn empirical_c2(model: &CoefficientModel, n_paths: usize, seed: u64) -> Result<f64> {
    Ok(flow_second_moment_sup(model, n_paths, derive_seed(seed, streams::AUDIT))?.max(1.0))
}

fn sup_source_norm(model: &CoefficientModel) -> Result<f64> {
    let mut sup = 0.0_f64;
    for i in 0..=model.grid().steps() {
        for w in model.probe_points(i) {
            sup = sup.max(op_norm(&model.at(i, w)?.s));
        }
    }
    Ok(sup)
}

pub fn riccati_parameters(model: &CoefficientModel, cfg: &RiccatiConfig, seed: u64) -> Result<RiccatiParameters> {
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidConfig("Riccati tolerance must be positive".into()));
    }
    if !(cfg.c2_safety >= 1.0) {
        return Err(Error::InvalidConfig("C2 safety factor must be at least 1".into()));
    }
    let t_final = model.grid().t_final();
    let c2 = cfg.c2_safety * empirical_c2(model, cfg.c2_paths, seed)?;
    let m_norm = op_norm(&model.final_datum());
    let s_sup = sup_source_norm(model)?;
    let bound = c2 * c2 * m_norm + 2.0 * c2 * c2 * t_final * s_sup;
    let radius = match cfg.r {
        Some(r) if r > bound && r.is_finite() => r,
        Some(r) => {
            return Err(Error::InvalidConfig(format!(
                "ball radius r = {r} must exceed the Lyapunov bound {bound:.6e}"
            )))
        }
        None if bound == 0.0 => 1.0,
        None => 2.0 * bound,
    };
    let mb = model.bounds().m_b;
    let delta_limit = (radius - bound) / (c2 * c2 * mb * mb * radius * radius);
    let delta = match cfg.delta {
        Some(d) if d > 0.0 && d <= t_final * (1.0 + 1e-12) => d,
        Some(d) => {
            return Err(Error::InvalidConfig(format!(
                "window δ = {d} must lie in (0, T = {t_final}]"
            )))
        }
        None => t_final.min(0.99 * delta_limit),
    };
    Ok(RiccatiParameters {
        c2,
        m_norm,
        s_sup,
        lyapunov_bound: bound,
        radius,
        delta_limit,
        delta,
    })
}

fn sup_op_norm(surfaces: &[Surface], grid: &crate::coefficients::TimeGrid, lo: usize) -> f64 {
    let mut sup = 0.0_f64;
    for (k, s) in surfaces.iter().enumerate() {
        for (w, _) in audit_nodes(grid.time(lo + k), s.is_constant()) {
            sup = sup.max(op_norm(&s.eval(w)));
        }
    }
    sup
}

fn riccati_source(c: &Coefficients, k: &DMatrix<f64>) -> DMatrix<f64> {
    let kb = k * &c.b;
    &c.s - &kb * kb.transpose()
}

/// `Λ` on steps `lo..hi` with final datum `terminal`; `k` is indexed from `lo`.
#[allow(clippy::too_many_arguments)]
fn lambda_window(
    model: &CoefficientModel,
    settings: &SolverSettings,
    paths: Option<&[crate::coefficients::BrownianPath]>,
    lo: usize,
    hi: usize,
    terminal: &Surface,
    k: &[Surface],
    radius: f64,
) -> Result<(Vec<Surface>, Vec<Surface>)> {
    let grid = model.grid();
    let n = model.basis().n();
    let norm_in = sup_op_norm(k, grid, lo);
    if !(norm_in <= radius) {
        return Err(Error::BallViolation {
            norm: norm_in,
            radius,
            window_start: grid.time(lo),
        });
    }
    let source = |i: usize, w: f64, c: &Coefficients| Ok(riccati_source(c, &k[i - lo].eval(w)));
    let out = match paths {
        None => {
            let sources = (lo..=hi)
                .map(|i| {
                    let c = model.at(i, 0.0)?;
                    source(i, 0.0, &c)
                })
                .collect::<Result<Vec<_>>>()?;
            let cd = (lo..hi)
                .map(|i| Ok(model.at(i, 0.0)?.c.diagonal().iter().copied().collect()))
                .collect::<Result<Vec<Vec<f64>>>>()?;
            let ps = exact_linear(model.basis(), grid.h(), terminal.mean(), &sources, &cd);
            let zeros = vec![Surface::constant(DMatrix::zeros(n, n)); hi - lo + 1];
            (ps.into_iter().map(Surface::constant).collect(), zeros)
        }
        Some(paths) => {
            let out = mc_representation(model, paths, lo, hi, terminal, &source, &settings.regression)?;
            let reg = effective_regression(model, &settings.regression);
            let q = extract_q_window(&out.p, paths, lo, grid, &reg)?;
            (out.p, q)
        }
    };
    let norm_out = sup_op_norm(&out.0, grid, lo);
    if !(norm_out <= radius) {
        return Err(Error::BallViolation {
            norm: norm_out,
            radius,
            window_start: grid.time(lo),
        });
    }
    Ok(out)
}

/// `Λ(K)` on the whole grid with final datum `terminal`.
pub fn lambda_apply(
    k_process: &[Surface],
    model: &CoefficientModel,
    terminal: &Surface,
    radius: f64,
    settings: &SolverSettings,
) -> Result<(Vec<Surface>, Vec<Surface>)> {
    let l = model.grid().steps();
    if k_process.len() != l + 1 {
        return Err(Error::ContractViolation(format!(
            "Λ input has {} times, grid has {}",
            k_process.len(),
            l + 1
        )));
    }
    let paths = match settings.backend {
        Backend::DeterministicExact => {
            if !model.is_deterministic() || !terminal.is_constant() {
                return Err(Error::InvalidConfig(
                    "deterministic-exact backend needs coefficients that do not depend on W".into(),
                ));
            }
            None
        }
        Backend::MonteCarlo => Some(solver_paths(model, settings)?),
    };
    lambda_window(model, settings, paths.as_deref(), 0, l, terminal, k_process, radius)
}

/// Windowed `Λ` iteration from `T` back to `0`.
pub fn riccati_solve(model: &CoefficientModel, settings: &SolverSettings, cfg: &RiccatiConfig) -> Result<BackwardSolution> {
    let grid = *model.grid();
    let n = model.basis().n();
    let params = riccati_parameters(model, cfg, settings.seed)?;
    let paths = match settings.backend {
        Backend::DeterministicExact => {
            if !model.is_deterministic() {
                return Err(Error::InvalidConfig(
                    "deterministic-exact backend needs coefficients that do not depend on W".into(),
                ));
            }
            None
        }
        Backend::MonteCarlo => {
            if settings.n_paths < 100 {
                return Err(Error::InvalidConfig(format!(
                    "monte-carlo backend needs at least 100 paths, got {}",
                    settings.n_paths
                )));
            }
            Some(solver_paths(model, settings)?)
        }
    };
    let mut meta = SolveMeta::new("riccati", model, settings);
    meta.empirical_c2 = Some(params.c2);
    meta.radius = Some(params.radius);
    let restart_limit = params.c2 * (params.m_norm + grid.t_final() * params.s_sup);
    let mut restart_ok = true;
    let terminal = Surface::constant(model.final_datum());
    let (mut p, q) = paste_windows(&grid, n, terminal, params.delta, cfg.max_halvings, &mut meta, |lo, hi, datum| {
        if hi < grid.steps() {
            let d = sup_op_norm(std::slice::from_ref(datum), &grid, hi);
            if !(d < restart_limit) && d > 0.0 {
                restart_ok = false;
            }
        }
        let initial = vec![datum.clone(); hi - lo + 1];
        let (p, q, residuals) = iterate_window(
            initial,
            grid.time(lo),
            cfg.tol,
            cfg.max_iter,
            |cur| lambda_window(model, settings, paths.as_deref(), lo, hi, datum, cur, params.radius),
            sup_distance(&grid, lo),
        )?;
        Ok(WindowOutcome {
            ratios: ratios_of(&residuals),
            p,
            q,
            residuals,
        })
    })?;
    meta.restart_bound_ok = Some(restart_ok);
    for s in p.iter_mut() {
        if s.is_constant() {
            let mut m = s.mean().clone();
            if crate::spectral::min_eigenvalue(&m) < 0.0 {
                repair_psd(&mut m, settings.psd_tol)?;
                meta.psd_repairs += 1;
                *s = Surface::constant(m);
            }
        }
    }
    Ok(BackwardSolution {
        basis: model.basis().clone(),
        grid,
        p,
        q,
        p0_std_error: None,
        meta,
    })
}

/// Scalar data of one eigenmode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModeData {
    pub lambda: f64,
    pub c: f64,
    pub b: f64,
    pub s: f64,
    pub m: f64,
}

pub const ORACLE_TOL: f64 = 1e-10;

/// `P(t)` at the requested times for the scalar Riccati equation
/// `-P' = (c² - 2λ)P - b²P² + s`, `P(T) = m`, by adaptive Dormand–Prince
/// integration in `τ = T - t`.
pub fn diagonal_oracle(mode: ModeData, t_final: f64, t_grid: &[f64]) -> Result<Vec<f64>> {
    let f = |p: f64| (mode.c * mode.c - 2.0 * mode.lambda) * p - mode.b * mode.b * p * p + mode.s;
    let mut order: Vec<usize> = (0..t_grid.len()).collect();
    let taus: Vec<f64> = t_grid.iter().map(|t| t_final - t).collect();
    if let Some(t) = taus.iter().find(|t| **t < -1e-12 || !t.is_finite()) {
        return Err(Error::Domain(format!("oracle time outside [0, T]: τ = {t}")));
    }
    order.sort_by(|a, b| taus[*a].total_cmp(&taus[*b]));
    let mut out = vec![0.0; t_grid.len()];
    let mut tau = 0.0;
    let mut p = mode.m;
    let mut h = 1e-3_f64.min(t_final.max(1e-12));
    for idx in order {
        let target = taus[idx].max(0.0);
        while target - tau > 1e-15 * target.max(1.0) {
            let remaining = target - tau;
            let truncated = h >= remaining;
            let step = if truncated { remaining } else { h };
            let (p_new, err) = dopri5_step(&f, p, step);
            let scale = ORACLE_TOL * (1.0 + p.abs().max(p_new.abs()));
            let fac = if err == 0.0 { 5.0 } else { (0.9 * (scale / err).powf(0.2)).clamp(0.2, 5.0) };
            if err <= scale {
                tau = if truncated { target } else { tau + step };
                p = p_new;
                if !(p.abs() <= 1.0 / ORACLE_TOL) {
                    return Err(Error::OracleFailure(format!("scalar Riccati blew up at τ = {tau:.6e}")));
                }
                if !truncated {
                    h = step * fac;
                }
            } else {
                h = step * fac;
            }
            if h < 1e-14 {
                return Err(Error::OracleFailure("step size underflow".into()));
            }
        }
        out[idx] = p;
    }
    Ok(out)
}

fn dopri5_step(f: &impl Fn(f64) -> f64, y: f64, h: f64) -> (f64, f64) {
    let k1 = f(y);
    let k2 = f(y + h * (k1 / 5.0));
    let k3 = f(y + h * (3.0 / 40.0 * k1 + 9.0 / 40.0 * k2));
    let k4 = f(y + h * (44.0 / 45.0 * k1 - 56.0 / 15.0 * k2 + 32.0 / 9.0 * k3));
    let k5 = f(y + h * (19372.0 / 6561.0 * k1 - 25360.0 / 2187.0 * k2 + 64448.0 / 6561.0 * k3 - 212.0 / 729.0 * k4));
    let k6 = f(y + h * (9017.0 / 3168.0 * k1 - 355.0 / 33.0 * k2 + 46732.0 / 5247.0 * k3 + 49.0 / 176.0 * k4
        - 5103.0 / 18656.0 * k5));
    let y5 = y + h * (35.0 / 384.0 * k1 + 500.0 / 1113.0 * k3 + 125.0 / 192.0 * k4 - 2187.0 / 6784.0 * k5
        + 11.0 / 84.0 * k6);
    let k7 = f(y5);
    let y4 = y + h * (5179.0 / 57600.0 * k1 + 7571.0 / 16695.0 * k3 + 393.0 / 640.0 * k4
        - 92097.0 / 339200.0 * k5
        + 187.0 / 2100.0 * k6
        + 1.0 / 40.0 * k7);
    (y5, (y5 - y4).abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_linear_case() {
        let mode = ModeData { lambda: 1.0, c: 0.0, b: 0.0, s: 0.0, m: 1.0 };
        let p = diagonal_oracle(mode, 1.0, &[0.0, 1.0]).unwrap();
        assert!((p[0] - (-2.0f64).exp()).abs() < 1e-9);
        assert_eq!(p[1], 1.0);
    }

    #[test]
    fn oracle_stationary_point() {
        let mode = ModeData { lambda: 1.0, c: 0.0, b: 1.0, s: 1.0, m: 0.0 };
        let p = diagonal_oracle(mode, 30.0, &[0.0]).unwrap();
        assert!((p[0] - (2f64.sqrt() - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn oracle_zero_data() {
        let mode = ModeData { lambda: 4.0, c: 0.3, b: 1.0, s: 0.0, m: 0.0 };
        let p = diagonal_oracle(mode, 1.0, &[0.0, 0.5, 1.0]).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn oracle_detects_blow_up() {
        // with s < 0 the comparison argument fails and P runs off to -∞
        let mode = ModeData { lambda: 0.0, c: 0.0, b: 1.0, s: -1.0, m: -1.0 };
        assert!(matches!(diagonal_oracle(mode, 10.0, &[0.0]), Err(Error::OracleFailure(_))));
    }
}
