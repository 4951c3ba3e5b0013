//! Backward stochastic Lyapunov equation
//!
//! ```text
//! -dP = (A'P + PA + C'PC + C'Q + QC + S) dt - Q dW,   P(T) = M.
//! ```
//!
//! Two backends share one interface.
//!
//! * `DeterministicExact` integrates every mode pair `(j, k)` exactly over
//!   each grid step, with the source interpolated linearly between grid
//!   times. It needs coefficients that do not depend on the driver.
//! * `MonteCarlo` propagates the pathwise representation
//!   `Y_i = h/2 F_i + Φ_i'(Y_{i+1} + h/2 F_{i+1})Φ_i` backward along an
//!   ensemble and takes conditional expectations by regression on `W_{t_i}`.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{
    derive_seed, sample_paths, streams, validate_model, BrownianPath, Coefficients, CoefficientModel, ModelKind,
    SourceField, TimeGrid,
};
use crate::error::{Error, Result};
use crate::regression::{regress, RegressionConfig, Surface};
use crate::spectral::{
    matrix_norm, min_eigenvalue, op_norm, repair_psd, sorted_eigenvalues, symmetrize, Norm, SpectralBasis,
    DEFAULT_PSD_TOL,
};
use crate::stats::{gauss_hermite_normal, pairwise_sum_matrices};

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_MAX_ITER: usize = 200;
pub const MAX_HALVINGS: usize = 5;
pub const SLOW_CONTRACTION: f64 = 0.9;
const AUDIT_NODES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Backend {
    DeterministicExact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub backend: Backend,
    pub n_paths: usize,
    pub seed: u64,
    pub regression: RegressionConfig,
    pub psd_tol: f64,
}

impl SolverSettings {
    pub fn exact() -> Self {
        Self {
            backend: Backend::DeterministicExact,
            n_paths: 0,
            seed: 0,
            regression: RegressionConfig::default(),
            psd_tol: DEFAULT_PSD_TOL,
        }
    }

    pub fn monte_carlo(n_paths: usize, seed: u64) -> Self {
        Self {
            backend: Backend::MonteCarlo,
            n_paths,
            seed,
            regression: RegressionConfig::default(),
            psd_tol: DEFAULT_PSD_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardConfig {
    /// Window length; `None` selects `min(T, 0.5 / (M_C² + 1))`.
    pub delta: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            delta: None,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            max_halvings: MAX_HALVINGS,
        }
    }
}

/// Iteration history of one backward window.
#[derive(Debug, Clone, Serialize)]
pub struct WindowRecord {
    pub start: f64,
    pub end: f64,
    pub delta: f64,
    pub iterations: usize,
    pub residuals: Vec<f64>,
    /// `r_k / r_{k-1}` for `k ≥ 2`.
    pub ratios: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveMeta {
    pub method: String,
    pub backend: Backend,
    pub n_paths: usize,
    pub seed: Option<u64>,
    pub regression_degree: usize,
    pub ridge: f64,
    pub windows: Vec<WindowRecord>,
    pub delta: Option<f64>,
    pub halvings: usize,
    pub max_asymmetry: f64,
    pub psd_repairs: usize,
    pub empirical_c2: Option<f64>,
    pub radius: Option<f64>,
    pub restart_bound_ok: Option<bool>,
}

impl SolveMeta {
    pub(crate) fn new(method: &str, model: &CoefficientModel, settings: &SolverSettings) -> Self {
        let mc = settings.backend == Backend::MonteCarlo;
        let reg = effective_regression(model, &settings.regression);
        Self {
            method: method.into(),
            backend: settings.backend,
            n_paths: if mc { settings.n_paths } else { 0 },
            seed: mc.then_some(settings.seed),
            regression_degree: if mc { reg.degree } else { 0 },
            ridge: if mc { reg.ridge } else { 0.0 },
            windows: Vec::new(),
            delta: None,
            halvings: 0,
            max_asymmetry: 0.0,
            psd_repairs: 0,
            empirical_c2: None,
            radius: None,
            restart_bound_ok: None,
        }
    }
}

/// `(P, Q)` on the grid. `P_i` and `Q_i` are surfaces in the driver value;
/// for deterministic coefficients they are constant.
#[derive(Debug, Clone)]
pub struct BackwardSolution {
    pub basis: Arc<SpectralBasis>,
    pub grid: TimeGrid,
    pub p: Vec<Surface>,
    pub q: Vec<Surface>,
    /// Entrywise Monte Carlo standard error of `P(0)`.
    pub p0_std_error: Option<DMatrix<f64>>,
    pub meta: SolveMeta,
}

impl BackwardSolution {
    pub fn p_mean(&self, i: usize) -> &DMatrix<f64> {
        self.p[i].mean()
    }

    pub fn p_at(&self, i: usize, w: f64) -> DMatrix<f64> {
        self.p[i].eval(w)
    }

    pub fn is_stochastic(&self) -> bool {
        self.p.iter().any(|s| !s.is_constant())
    }

    /// Smallest eigenvalue of `P(t_i, w)` over all grid times and audit nodes.
    pub fn min_eigenvalue(&self) -> f64 {
        let mut m = f64::INFINITY;
        for (i, s) in self.p.iter().enumerate() {
            for (w, _) in audit_nodes(self.grid.time(i), s.is_constant()) {
                m = m.min(min_eigenvalue(&s.eval(w)));
            }
        }
        m
    }

    /// Largest `|P_jk - P_kj|` over grid times and audit nodes.
    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0_f64;
        for (i, s) in self.p.iter().enumerate() {
            for (w, _) in audit_nodes(self.grid.time(i), s.is_constant()) {
                let p = s.eval(w);
                m = m.max((&p - p.transpose()).amax());
            }
        }
        m
    }

    /// `sup_i ‖P(t_i)‖` with `‖·‖ = (E|·|²_{L(H)})^{1/2}`.
    pub fn sup_norm(&self) -> f64 {
        (0..self.p.len())
            .map(|i| surface_norm(&self.p[i], self.grid.time(i), Norm::OpH, &self.basis))
            .fold(0.0, f64::max)
    }

    /// CSV with the eigenvalues of `E P(t_i)` and the `K_s` norm of `Q(t_i)`.
    pub fn eigen_csv(&self) -> String {
        use std::fmt::Write as _;
        let n = self.basis.n();
        let mut out = String::from("t");
        for k in 1..=n {
            let _ = write!(out, ",p_eig_{k}");
        }
        out.push_str(",q_ks\n");
        for i in 0..self.p.len() {
            let _ = write!(out, "{:.16e}", self.grid.time(i));
            for v in sorted_eigenvalues(self.p[i].mean()) {
                let _ = write!(out, ",{v:.16e}");
            }
            let qk = surface_norm(&self.q[i], self.grid.time(i), Norm::Ks, &self.basis);
            let _ = writeln!(out, ",{qk:.16e}");
        }
        out
    }
}

/// Gauss–Hermite nodes and weights of the law of `W_t`.
pub fn audit_nodes(t: f64, constant: bool) -> Vec<(f64, f64)> {
    if constant || t <= 0.0 {
        return vec![(0.0, 1.0)];
    }
    let (z, w) = gauss_hermite_normal(AUDIT_NODES);
    let sd = t.sqrt();
    z.into_iter().zip(w).map(|(z, w)| (z * sd, w)).collect()
}

/// `(E|S(W_t)|²)^{1/2}` for a surface `S` at time `t`.
pub fn surface_norm(s: &Surface, t: f64, which: Norm, basis: &SpectralBasis) -> f64 {
    audit_nodes(t, s.is_constant())
        .into_iter()
        .map(|(w, wt)| wt * matrix_norm(basis, &s.eval(w), which).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn surface_distance(a: &Surface, b: &Surface, t: f64) -> f64 {
    let constant = a.is_constant() && b.is_constant();
    audit_nodes(t, constant)
        .into_iter()
        .map(|(w, wt)| wt * op_norm(&(a.eval(w) - b.eval(w))).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Regression settings actually used for `model`: deterministic coefficients
/// give deterministic `P`, so only the constant feature is fitted.
pub fn effective_regression(model: &CoefficientModel, reg: &RegressionConfig) -> RegressionConfig {
    if model.is_deterministic() {
        RegressionConfig { degree: 0, ..*reg }
    } else {
        *reg
    }
}

/// Pathwise source `F(t_i, W_{t_i})` of a linear backward equation.
pub(crate) type SourceFn<'a> = dyn Fn(usize, f64, &Coefficients) -> Result<DMatrix<f64>> + Sync + 'a;

/// `(e^{-ah}, w_next, w_cur)` with
/// `∫_0^h e^{-a(h-σ)} (F_next (1 - σ/h) + F_cur σ/h) dσ = w_next F_next + w_cur F_cur`.
fn step_weights(a: f64, h: f64) -> (f64, f64, f64) {
    let x = a * h;
    let e = (-x).exp();
    let (phi0, phi1) = if x.abs() < 0.1 {
        let mut p0 = 0.0;
        let mut p1 = 0.0;
        let mut pow = 1.0;
        let mut fact = 1.0;
        for n in 0..14 {
            let nf = n as f64;
            fact *= nf + 1.0;
            p0 += pow / fact;
            p1 += pow * (nf + 1.0) / (fact * (nf + 2.0));
            pow *= -x;
        }
        (h * p0, h * p1)
    } else {
        let phi0 = -(-x).exp_m1() / a;
        let phi1 = phi0 - (1.0 - e * (1.0 + x)) / (a * x);
        (phi0, phi1)
    };
    (e, phi0 - phi1, phi1)
}

/// Exact backward integration of `-dP_jk/dt = -a_jk P_jk + F_jk` on grid
/// steps `lo..hi`, with `a_jk = λ_j + λ_k - c_j c_k` frozen on each step and
/// `F` linear between grid times. `sources` and the returned vector are
/// indexed from `lo`; `cdiag[i - lo]` is the diagonal of `C` on step `i`.
pub(crate) fn exact_linear(
    basis: &SpectralBasis,
    h: f64,
    terminal: &DMatrix<f64>,
    sources: &[DMatrix<f64>],
    cdiag: &[Vec<f64>],
) -> Vec<DMatrix<f64>> {
    let steps = sources.len() - 1;
    let n = basis.n();
    let lam = basis.lambdas();
    let mut out = vec![DMatrix::zeros(n, n); steps + 1];
    out[steps] = terminal.clone();
    for i in (0..steps).rev() {
        let c = &cdiag[i];
        let next = &out[i + 1];
        let (f_next, f_cur) = (&sources[i + 1], &sources[i]);
        let mut cur = DMatrix::zeros(n, n);
        for j in 0..n {
            for k in j..n {
                let a = lam[j] + lam[k] - c[j] * c[k];
                let (e, wn, wc) = step_weights(a, h);
                let v = e * next[(j, k)] + wn * f_next[(j, k)] + wc * f_cur[(j, k)];
                cur[(j, k)] = v;
                if j != k {
                    let v2 = e * next[(k, j)] + wn * f_next[(k, j)] + wc * f_cur[(k, j)];
                    cur[(k, j)] = v2;
                }
            }
        }
        symmetrize(&mut cur);
        out[i] = cur;
    }
    out
}

fn c_diagonals(model: &CoefficientModel, lo: usize, hi: usize) -> Result<Vec<Vec<f64>>> {
    (lo..hi)
        .map(|i| {
            let c = &model.at(i, 0.0)?.c;
            let n = c.nrows();
            for j in 0..n {
                for k in 0..n {
                    if j != k && c[(j, k)] != 0.0 {
                        return Err(Error::InvalidConfig(
                            "deterministic-exact backend needs a diagonal C".into(),
                        ));
                    }
                }
            }
            Ok(c.diagonal().iter().copied().collect())
        })
        .collect()
}

fn require_exact(model: &CoefficientModel) -> Result<()> {
    if !model.is_deterministic() {
        return Err(Error::InvalidConfig(
            "deterministic-exact backend needs coefficients that do not depend on W".into(),
        ));
    }
    Ok(())
}

fn require_mc(settings: &SolverSettings) -> Result<()> {
    if settings.n_paths < 100 {
        return Err(Error::InvalidConfig(format!(
            "monte-carlo backend needs at least 100 paths, got {}",
            settings.n_paths
        )));
    }
    Ok(())
}

pub(crate) fn solver_paths(model: &CoefficientModel, settings: &SolverSettings) -> Result<Vec<BrownianPath>> {
    sample_paths(model.grid(), settings.n_paths, derive_seed(settings.seed, streams::SOLVER))
}

/// `e^{hA}(I + C ΔW)`.
fn step_flow(decay: &nalgebra::DVector<f64>, c: &DMatrix<f64>, dw: f64) -> DMatrix<f64> {
    let n = c.nrows();
    let mut g = DMatrix::identity(n, n) + c * dw;
    for (j, mut row) in g.row_iter_mut().enumerate() {
        row *= decay[j];
    }
    g
}

fn congruence_decay(x: &DMatrix<f64>, decay: &nalgebra::DVector<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    DMatrix::from_fn(n, n, |j, k| decay[j] * x[(j, k)] * decay[k])
}

pub(crate) struct McOutput {
    pub p: Vec<Surface>,
    pub p0_std_error: Option<DMatrix<f64>>,
    pub asymmetry: f64,
}

/// Pathwise representation on steps `lo..hi` (output indexed from `lo`).
pub(crate) fn mc_representation(
    model: &CoefficientModel,
    paths: &[BrownianPath],
    lo: usize,
    hi: usize,
    terminal: &Surface,
    source: &SourceFn<'_>,
    reg: &RegressionConfig,
) -> Result<McOutput> {
    let grid = model.grid();
    let h = grid.h();
    let decay = model.basis().semigroup_diag(h);
    let reg = effective_regression(model, reg);
    let mut state: Vec<(DMatrix<f64>, DMatrix<f64>)> = paths
        .par_iter()
        .map(|p| {
            let w = p.w(hi);
            let c = model.at(hi, w)?;
            Ok((terminal.eval(w), source(hi, w, &c)?))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![terminal.clone(); hi - lo + 1];
    let mut asymmetry = 0.0_f64;
    let mut p0_std_error = None;
    for i in (lo..hi).rev() {
        state = paths
            .par_iter()
            .zip(state.into_par_iter())
            .map(|(p, (y, f_next))| {
                let w = p.w(i);
                let c = model.at(i, w)?;
                let f = source(i, w, &c)?;
                let phi = step_flow(&decay, &c.c, p.dw(i));
                let inner = y + &f_next * (0.5 * h);
                let mut y_new = phi.transpose() * inner * &phi;
                y_new += &f * (0.5 * h);
                Ok((y_new, f))
            })
            .collect::<Result<_>>()?;
        let ws: Vec<f64> = paths.iter().map(|p| p.w(i)).collect();
        let ys: Vec<DMatrix<f64>> = state.iter().map(|(y, _)| y.clone()).collect();
        let mut s = regress(&ws, &ys, grid.time(i).sqrt(), &reg)?;
        asymmetry = asymmetry.max(s.symmetrize());
        if i == 0 {
            p0_std_error = Some(entrywise_std_error(&ys, s.mean()));
        }
        out[i - lo] = s;
    }
    Ok(McOutput {
        p: out,
        p0_std_error,
        asymmetry,
    })
}

fn entrywise_std_error(samples: &[DMatrix<f64>], mean: &DMatrix<f64>) -> DMatrix<f64> {
    let n = samples.len();
    if n < 2 {
        return DMatrix::zeros(mean.nrows(), mean.ncols());
    }
    let sq: Vec<DMatrix<f64>> = samples.iter().map(|y| (y - mean).map(|v| v * v)).collect();
    let var = pairwise_sum_matrices(&sq) / (n - 1) as f64;
    var.map(|v| (v / n as f64).sqrt())
}

/// `Q(t_i) ≈ E[(P̂_{i+1}(W_{i+1}) - P̂_{i+1}(W_i)) ΔW_i / h | W_i]`, together
/// with the values `P̂_{i+1}(W_{i+1})` along the paths.
fn q_step(
    next: &Surface,
    paths: &[BrownianPath],
    i: usize,
    grid: &TimeGrid,
    reg: &RegressionConfig,
) -> Result<(Surface, Vec<DMatrix<f64>>)> {
    let h = grid.h();
    let evals: Vec<(DMatrix<f64>, DMatrix<f64>)> = paths
        .par_iter()
        .map(|p| {
            let a = next.eval(p.w(i + 1));
            let b = next.eval(p.w(i));
            let target = (&a - b) * (p.dw(i) / h);
            (a, target)
        })
        .collect();
    let ws: Vec<f64> = paths.iter().map(|p| p.w(i)).collect();
    let (a_vals, targets): (Vec<_>, Vec<_>) = evals.into_iter().unzip();
    let mut q = regress(&ws, &targets, grid.time(i).sqrt(), reg)?;
    q.symmetrize();
    Ok((q, a_vals))
}

fn zero_surfaces(n: usize, len: usize) -> Vec<Surface> {
    vec![Surface::constant(DMatrix::zeros(n, n)); len]
}

/// Martingale integrand `Q` from a solution surface on the paths it was
/// computed with.
pub fn extract_q(
    p: &[Surface],
    paths: &[BrownianPath],
    grid: &TimeGrid,
    reg: &RegressionConfig,
) -> Result<Vec<Surface>> {
    extract_q_window(p, paths, 0, grid, reg)
}

/// `Q` on steps `lo..lo + p.len() - 1`; `p` and the output are indexed from `lo`.
pub(crate) fn extract_q_window(
    p: &[Surface],
    paths: &[BrownianPath],
    lo: usize,
    grid: &TimeGrid,
    reg: &RegressionConfig,
) -> Result<Vec<Surface>> {
    let n = p[0].dim();
    let mut out = zero_surfaces(n, p.len());
    if p.iter().all(|s| s.is_constant()) {
        return Ok(out);
    }
    for k in 0..p.len() - 1 {
        out[k] = q_step(&p[k + 1], paths, lo + k, grid, reg)?.0;
    }
    Ok(out)
}

/// One application of `Γ` by dynamic programming on steps `lo..hi`;
/// `p_in` and the outputs are indexed from `lo`.
fn mc_gamma(
    model: &CoefficientModel,
    paths: &[BrownianPath],
    lo: usize,
    hi: usize,
    terminal: &Surface,
    p_in: &[Surface],
    reg: &RegressionConfig,
) -> Result<(Vec<Surface>, Vec<Surface>)> {
    let grid = model.grid();
    let h = grid.h();
    let n = model.basis().n();
    let decay = model.basis().semigroup_diag(h);
    let reg = effective_regression(model, reg);
    let mut p_out = vec![terminal.clone(); hi - lo + 1];
    let mut q_out = zero_surfaces(n, hi - lo + 1);
    for i in (lo..hi).rev() {
        let (q, a_vals) = q_step(&p_out[i + 1 - lo], paths, i, grid, &reg)?;
        let pin = &p_in[i - lo];
        let targets: Vec<DMatrix<f64>> = paths
            .par_iter()
            .zip(a_vals.par_iter())
            .map(|(p, a)| {
                let w = p.w(i);
                let c = model.at(i, w)?;
                let qw = q.eval(w);
                let cc = &c.c;
                let drift = cc.transpose() * pin.eval(w) * cc + &c.s + cc.transpose() * &qw + &qw * cc;
                Ok(congruence_decay(&(a + drift * h), &decay))
            })
            .collect::<Result<_>>()?;
        let ws: Vec<f64> = paths.iter().map(|p| p.w(i)).collect();
        let mut s = regress(&ws, &targets, grid.time(i).sqrt(), &reg)?;
        s.symmetrize();
        p_out[i - lo] = s;
        q_out[i - lo] = q;
    }
    Ok((p_out, q_out))
}

/// One application of `Γ` with the exact backend on steps `lo..hi`.
fn exact_gamma(
    model: &CoefficientModel,
    lo: usize,
    hi: usize,
    terminal: &DMatrix<f64>,
    p_in: &[DMatrix<f64>],
) -> Result<Vec<DMatrix<f64>>> {
    let n = model.basis().n();
    let sources = (lo..=hi)
        .map(|i| {
            let c = model.at(i, 0.0)?;
            Ok(c.c.transpose() * &p_in[i - lo] * &c.c + &c.s)
        })
        .collect::<Result<Vec<_>>>()?;
    let zero_c = vec![vec![0.0; n]; hi - lo];
    Ok(exact_linear(model.basis(), model.grid().h(), terminal, &sources, &zero_c))
}

fn positivity_expected(model: &CoefficientModel) -> bool {
    let r = validate_model(model);
    r.m_psd && r.s_psd && r.s_symmetric
}

fn finalize_psd(p: &mut [Surface], tol: f64) -> Result<usize> {
    let mut repairs = 0;
    for s in p.iter_mut() {
        if s.is_constant() {
            let mut m = s.mean().clone();
            if min_eigenvalue(&m) < 0.0 {
                repair_psd(&mut m, tol)?;
                repairs += 1;
                *s = Surface::constant(m);
            }
        }
    }
    Ok(repairs)
}

/// `P(t) = E^{F_t}[Φ(t→T)' M Φ(t→T) + ∫_t^T Φ(t→s)' S(s) Φ(t→s) ds]`.
pub fn lyapunov_representation_solve(model: &CoefficientModel, settings: &SolverSettings) -> Result<BackwardSolution> {
    let source = |_: usize, _: f64, c: &Coefficients| Ok(c.s.clone());
    let terminal = model.final_datum();
    linear_solve(model, settings, &Surface::constant(terminal), &source, "representation")
}

/// Linear backward equation with rate including `C` and a general source.
pub(crate) fn linear_solve(
    model: &CoefficientModel,
    settings: &SolverSettings,
    terminal: &Surface,
    source: &SourceFn<'_>,
    method: &str,
) -> Result<BackwardSolution> {
    let grid = *model.grid();
    let l = grid.steps();
    let n = model.basis().n();
    let mut meta = SolveMeta::new(method, model, settings);
    let (mut p, q, p0_std_error) = match settings.backend {
        Backend::DeterministicExact => {
            require_exact(model)?;
            if !terminal.is_constant() {
                return Err(Error::InvalidConfig("exact backend needs a deterministic final datum".into()));
            }
            let sources = (0..=l)
                .map(|i| {
                    let c = model.at(i, 0.0)?;
                    source(i, 0.0, &c)
                })
                .collect::<Result<Vec<_>>>()?;
            let cd = c_diagonals(model, 0, l)?;
            let ps = exact_linear(model.basis(), grid.h(), terminal.mean(), &sources, &cd);
            let p: Vec<Surface> = ps.into_iter().map(Surface::constant).collect();
            (p, zero_surfaces(n, l + 1), None)
        }
        Backend::MonteCarlo => {
            require_mc(settings)?;
            let paths = solver_paths(model, settings)?;
            let out = mc_representation(model, &paths, 0, l, terminal, source, &settings.regression)?;
            meta.max_asymmetry = out.asymmetry;
            let reg = effective_regression(model, &settings.regression);
            let q = extract_q(&out.p, &paths, &grid, &reg)?;
            (out.p, q, out.p0_std_error)
        }
    };
    if positivity_expected(model) && method == "representation" {
        meta.psd_repairs = finalize_psd(&mut p, settings.psd_tol)?;
    }
    Ok(BackwardSolution {
        basis: model.basis().clone(),
        grid,
        p,
        q,
        p0_std_error,
        meta,
    })
}

/// `Γ(P_in)`: the solution of the linear equation whose source is
/// `C'P_in C + S` on the whole grid.
pub fn gamma_apply(
    p_in: &[Surface],
    model: &CoefficientModel,
    settings: &SolverSettings,
) -> Result<(Vec<Surface>, Vec<Surface>)> {
    let l = model.grid().steps();
    if p_in.len() != l + 1 {
        return Err(Error::ContractViolation(format!(
            "Γ input has {} times, grid has {}",
            p_in.len(),
            l + 1
        )));
    }
    let terminal = Surface::constant(model.final_datum());
    match settings.backend {
        Backend::DeterministicExact => {
            require_exact(model)?;
            let mats: Vec<DMatrix<f64>> = p_in.iter().map(|s| s.mean().clone()).collect();
            let out = exact_gamma(model, 0, l, terminal.mean(), &mats)?;
            let n = model.basis().n();
            Ok((out.into_iter().map(Surface::constant).collect(), zero_surfaces(n, l + 1)))
        }
        Backend::MonteCarlo => {
            require_mc(settings)?;
            let paths = solver_paths(model, settings)?;
            mc_gamma(model, &paths, 0, l, &terminal, p_in, &settings.regression)
        }
    }
}

fn random_symmetric(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    symmetrize(&mut m);
    m
}

/// Measured Lipschitz ratio of `Γ` on the last window of length `delta`:
/// `sup_t |Γ(P¹) - Γ(P²)| / sup_t |P¹ - P²|` for two random symmetric
/// inputs held constant in time.
pub fn gamma_contraction_ratio(
    model: &CoefficientModel,
    settings: &SolverSettings,
    delta: f64,
    seed: u64,
) -> Result<f64> {
    let grid = model.grid();
    let l = grid.steps();
    let w = ((delta / grid.h() + 1e-9).floor() as usize).clamp(1, l);
    let lo = l - w;
    let n = model.basis().n();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::AUDIT));
    let a = random_symmetric(n, &mut rng);
    let b = random_symmetric(n, &mut rng);
    let din = op_norm(&(&a - &b));
    let terminal = Surface::constant(model.final_datum());
    let dout = match settings.backend {
        Backend::DeterministicExact => {
            require_exact(model)?;
            let oa = exact_gamma(model, lo, l, terminal.mean(), &vec![a; w + 1])?;
            let ob = exact_gamma(model, lo, l, terminal.mean(), &vec![b; w + 1])?;
            oa.iter().zip(&ob).map(|(x, y)| op_norm(&(x - y))).fold(0.0, f64::max)
        }
        Backend::MonteCarlo => {
            require_mc(settings)?;
            let paths = solver_paths(model, settings)?;
            let sa = vec![Surface::constant(a); w + 1];
            let sb = vec![Surface::constant(b); w + 1];
            let (oa, _) = mc_gamma(model, &paths, lo, l, &terminal, &sa, &settings.regression)?;
            let (ob, _) = mc_gamma(model, &paths, lo, l, &terminal, &sb, &settings.regression)?;
            oa.iter()
                .zip(&ob)
                .enumerate()
                .map(|(k, (x, y))| surface_distance(x, y, grid.time(lo + k)))
                .fold(0.0, f64::max)
        }
    };
    Ok(dout / din)
}

pub fn auto_delta(model: &CoefficientModel) -> f64 {
    let mc = model.bounds().m_c;
    model.grid().t_final().min(0.5 / (mc * mc + 1.0))
}

pub(crate) struct WindowOutcome {
    pub p: Vec<Surface>,
    pub q: Vec<Surface>,
    pub residuals: Vec<f64>,
    pub ratios: Vec<f64>,
}

impl WindowOutcome {
    pub fn slow(&self) -> bool {
        self.ratios.iter().any(|r| *r >= SLOW_CONTRACTION)
    }
}

pub(crate) fn ratios_of(residuals: &[f64]) -> Vec<f64> {
    residuals
        .windows(2)
        .map(|w| if w[0] == 0.0 { 0.0 } else { w[1] / w[0] })
        .collect()
}

/// Fixed-point iteration of a window map `F` from the constant initial
/// iterate; `dist` is the sup distance of two iterates.
pub(crate) fn iterate_window<F, D>(
    initial: Vec<Surface>,
    window_start: f64,
    tol: f64,
    max_iter: usize,
    mut apply: F,
    dist: D,
) -> Result<(Vec<Surface>, Vec<Surface>, Vec<f64>)>
where
    F: FnMut(&[Surface]) -> Result<(Vec<Surface>, Vec<Surface>)>,
    D: Fn(&[Surface], &[Surface]) -> (f64, f64),
{
    let mut cur = initial;
    let mut residuals = Vec::new();
    loop {
        let (next, q) = apply(&cur)?;
        let (r, scale) = dist(&next, &cur);
        residuals.push(r);
        cur = next;
        if r <= tol * scale.max(1.0) {
            return Ok((cur, q, residuals));
        }
        if residuals.len() >= max_iter {
            return Err(Error::NonConvergence {
                window_start,
                iterations: residuals.len(),
                residuals,
            });
        }
    }
}

pub(crate) fn sup_distance(grid: &TimeGrid, lo: usize) -> impl Fn(&[Surface], &[Surface]) -> (f64, f64) + '_ {
    move |a: &[Surface], b: &[Surface]| {
        let mut r = 0.0_f64;
        let mut scale = 0.0_f64;
        for (k, (x, y)) in a.iter().zip(b).enumerate() {
            let t = grid.time(lo + k);
            r = r.max(surface_distance(x, y, t));
            let zero = Surface::constant(DMatrix::zeros(x.dim(), x.dim()));
            scale = scale.max(surface_distance(x, &zero, t));
        }
        (r, scale)
    }
}

/// Backward window pasting shared by the Picard and Riccati drivers.
/// `solve_window(lo, hi, datum, delta)` returns the window outcome.
pub(crate) fn paste_windows<W>(
    grid: &TimeGrid,
    n: usize,
    terminal: Surface,
    initial_delta: f64,
    max_halvings: usize,
    meta: &mut SolveMeta,
    mut solve_window: W,
) -> Result<(Vec<Surface>, Vec<Surface>)>
where
    W: FnMut(usize, usize, &Surface) -> Result<WindowOutcome>,
{
    let l = grid.steps();
    let h = grid.h();
    let mut p: Vec<Option<Surface>> = vec![None; l + 1];
    let mut q = zero_surfaces(n, l + 1);
    p[l] = Some(terminal);
    let mut delta = initial_delta;
    let mut hi = l;
    while hi > 0 {
        let w = ((delta / h + 1e-9).floor() as usize).max(1);
        let lo = hi.saturating_sub(w);
        let datum = p[hi].clone().expect("window datum");
        let can_halve = meta.halvings < max_halvings && w > 1;
        match solve_window(lo, hi, &datum) {
            Ok(out) if out.slow() && can_halve => {
                delta *= 0.5;
                meta.halvings += 1;
            }
            Ok(out) => {
                meta.windows.push(WindowRecord {
                    start: grid.time(lo),
                    end: grid.time(hi),
                    delta,
                    iterations: out.residuals.len(),
                    residuals: out.residuals,
                    ratios: out.ratios,
                });
                for (k, (ps, qs)) in out.p.into_iter().zip(out.q).enumerate() {
                    let i = lo + k;
                    if i < hi {
                        p[i] = Some(ps);
                        q[i] = qs;
                    }
                }
                hi = lo;
            }
            Err(Error::NonConvergence { .. }) if can_halve => {
                delta *= 0.5;
                meta.halvings += 1;
            }
            Err(e) => return Err(e),
        }
    }
    meta.delta = Some(delta);
    Ok((p.into_iter().map(|s| s.expect("every grid time solved")).collect(), q))
}

/// Windowed Picard iteration of `Γ`, pasted backward from `T` to `0`.
pub fn picard_solve(model: &CoefficientModel, settings: &SolverSettings, cfg: &PicardConfig) -> Result<BackwardSolution> {
    let grid = *model.grid();
    let n = model.basis().n();
    let delta = cfg.delta.unwrap_or_else(|| auto_delta(model));
    if !(delta > 0.0) || delta > grid.t_final() * (1.0 + 1e-12) {
        return Err(Error::InvalidConfig(format!(
            "window δ = {delta} must lie in (0, T = {}]",
            grid.t_final()
        )));
    }
    if !(cfg.tol > 0.0) {
        return Err(Error::InvalidConfig("Picard tolerance must be positive".into()));
    }
    let paths = match settings.backend {
        Backend::DeterministicExact => {
            require_exact(model)?;
            None
        }
        Backend::MonteCarlo => {
            require_mc(settings)?;
            Some(solver_paths(model, settings)?)
        }
    };
    let mut meta = SolveMeta::new("picard", model, settings);
    let terminal = Surface::constant(model.final_datum());
    let (mut p, q) = paste_windows(&grid, n, terminal, delta, cfg.max_halvings, &mut meta, |lo, hi, datum| {
        let initial = vec![datum.clone(); hi - lo + 1];
        let dist = sup_distance(&grid, lo);
        let (p, q, residuals) = match &paths {
            None => iterate_window(
                initial,
                grid.time(lo),
                cfg.tol,
                cfg.max_iter,
                |cur| {
                    let mats: Vec<DMatrix<f64>> = cur.iter().map(|s| s.mean().clone()).collect();
                    let out = exact_gamma(model, lo, hi, datum.mean(), &mats)?;
                    Ok((out.into_iter().map(Surface::constant).collect(), zero_surfaces(n, hi - lo + 1)))
                },
                dist,
            )?,
            Some(paths) => iterate_window(
                initial,
                grid.time(lo),
                cfg.tol,
                cfg.max_iter,
                |cur| mc_gamma(model, paths, lo, hi, datum, cur, &settings.regression),
                dist,
            )?,
        };
        Ok(WindowOutcome {
            ratios: ratios_of(&residuals),
            p,
            q,
            residuals,
        })
    })?;
    if positivity_expected(model) {
        meta.psd_repairs = finalize_psd(&mut p, settings.psd_tol)?;
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

#[derive(Debug, Clone, Serialize)]
pub struct AprioriRow {
    pub delta: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AprioriReport {
    pub weak_source: bool,
    pub rows: Vec<AprioriRow>,
    pub lhs_finite: bool,
    pub lhs_monotone: bool,
}

fn expected_sq_norm(model: &CoefficientModel, i: usize, which: Norm) -> Result<f64> {
    let basis = model.basis();
    let t = model.grid().time(i);
    let mut acc = 0.0;
    for (w, wt) in audit_nodes(t, model.is_deterministic()) {
        let s = &model.at(i, w)?.s;
        acc += wt * matrix_norm(basis, s, which).powi(2);
    }
    Ok(acc)
}

/// Left and right sides of the a-priori estimate on `[T-δ, T]` for each `δ`.
///
/// The left side is `sup_t E|P(t)|² + ∫ E|Q|²_{K_s}`; the right side is
/// `E|M|² + δ ∫ E|S|²` for bounded sources and `E|M|² + δ^{1-2ρ} ∫ E|S|²_K`
/// when `weak_source` is set.
pub fn apriori_audit(
    solution: &BackwardSolution,
    model: &CoefficientModel,
    deltas: &[f64],
    weak_source: bool,
) -> Result<AprioriReport> {
    let grid = &solution.grid;
    let basis = &solution.basis;
    let l = grid.steps();
    let h = grid.h();
    let t_final = grid.t_final();
    let m2 = op_norm(&model.final_datum()).powi(2);
    let rho = basis.rho();
    let mut sorted: Vec<f64> = deltas.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut rows = Vec::new();
    for &delta in &sorted {
        if !(delta > 0.0) || delta > t_final * (1.0 + 1e-12) {
            return Err(Error::InvalidConfig(format!("audit window δ = {delta} outside (0, T]")));
        }
        let lo = l - ((delta / h + 1e-9).floor() as usize).min(l);
        let mut sup_p = 0.0_f64;
        let mut q_int = 0.0;
        let mut s_int = 0.0;
        for i in lo..=l {
            let t = grid.time(i);
            sup_p = sup_p.max(surface_norm(&solution.p[i], t, Norm::OpH, basis).powi(2));
            if i < l {
                q_int += h * surface_norm(&solution.q[i], t, Norm::Ks, basis).powi(2);
                let which = if weak_source { Norm::K } else { Norm::OpH };
                s_int += h * expected_sq_norm(model, i, which)?;
            }
        }
        let lhs = sup_p + q_int;
        let weight = if weak_source { delta.powf(1.0 - 2.0 * rho) } else { delta };
        let rhs = m2 + weight * s_int;
        rows.push(AprioriRow {
            delta,
            lhs,
            rhs,
            ratio: (rhs > 0.0).then(|| lhs / rhs),
        });
    }
    let lhs_finite = rows.iter().all(|r| r.lhs.is_finite());
    let lhs_monotone = rows.windows(2).all(|w| w[1].lhs <= w[0].lhs);
    Ok(AprioriReport {
        weak_source,
        rows,
        lhs_finite,
        lhs_monotone,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct JnStabilityRow {
    pub n: f64,
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct JnStabilityReport {
    pub epsilon: f64,
    pub delta: f64,
    pub rows: Vec<JnStabilityRow>,
    pub decreasing: bool,
    pub tolerance: f64,
    pub below_tolerance: bool,
    /// `ε^{-2ρ}`; infinite at `ε = 0`.
    pub epsilon_factor: f64,
    /// `|M - J_n M J_n|_K` for the largest `n`.
    pub final_datum_defect_k: f64,
    /// `|M - J_n M J_n|_{L(H)}`, the distance at `t = T`, for the largest `n`.
    pub distance_at_final: f64,
    pub controlled: bool,
}

/// Solution of the regularized equation with data `J_n M J_n`, `J_n S J_n`
/// and `C'(J_n P J_n)C`; deterministic coefficients only.
pub fn jn_regularized_solve(model: &CoefficientModel, n_reg: f64) -> Result<Vec<DMatrix<f64>>> {
    require_exact(model)?;
    let basis = model.basis();
    let grid = model.grid();
    let l = grid.steps();
    let j = basis.jn_diag(n_reg);
    let jm = |m: &DMatrix<f64>| {
        let n = m.nrows();
        DMatrix::from_fn(n, n, |a, b| j[a] * m[(a, b)] * j[b])
    };
    let terminal = jm(&model.final_datum());
    let sources = (0..=l)
        .map(|i| Ok(jm(&model.at(i, 0.0)?.s)))
        .collect::<Result<Vec<_>>>()?;
    let cd: Vec<Vec<f64>> = c_diagonals(model, 0, l)?
        .into_iter()
        .map(|c| c.iter().zip(j.iter()).map(|(c, j)| c * j).collect())
        .collect();
    Ok(exact_linear(basis, grid.h(), &terminal, &sources, &cd))
}

/// Distance of the `J_n`-regularized solutions to the solution on
/// `[T-δ, T-ε]` for each `n`.
pub fn jn_stability_audit(
    model: &CoefficientModel,
    ns: &[f64],
    epsilon: f64,
    delta: f64,
    tolerance: f64,
) -> Result<JnStabilityReport> {
    require_exact(model)?;
    if !(epsilon >= 0.0) || !(epsilon < delta) {
        return Err(Error::InvalidConfig(format!("need 0 ≤ ε < δ, got ε = {epsilon}, δ = {delta}")));
    }
    if ns.is_empty() {
        return Err(Error::InvalidConfig("J_n audit needs at least one n".into()));
    }
    let grid = model.grid();
    let t_final = grid.t_final();
    let exact = lyapunov_representation_solve(model, &SolverSettings::exact())?;
    let idx: Vec<usize> = (0..=grid.steps())
        .filter(|i| {
            let t = grid.time(*i);
            t >= t_final - delta - 1e-12 && t <= t_final - epsilon + 1e-12
        })
        .collect();
    let mut rows = Vec::new();
    for &n in ns {
        let pn = jn_regularized_solve(model, n)?;
        let d = idx
            .iter()
            .map(|&i| op_norm(&(&pn[i] - exact.p_mean(i))))
            .fold(0.0, f64::max);
        rows.push(JnStabilityRow { n, distance: d });
    }
    let decreasing = rows.windows(2).all(|w| w[1].distance < w[0].distance);
    let last = rows.last().expect("nonempty");
    let n_max = last.n;
    let m = model.final_datum();
    let j = model.basis().jn_diag(n_max);
    let jmj = DMatrix::from_fn(m.nrows(), m.ncols(), |a, b| j[a] * m[(a, b)] * j[b]);
    let defect = &m - jmj;
    let epsilon_factor = if epsilon == 0.0 {
        f64::INFINITY
    } else {
        epsilon.powf(-2.0 * model.basis().rho())
    };
    Ok(JnStabilityReport {
        epsilon,
        delta,
        decreasing,
        tolerance,
        below_tolerance: last.distance <= tolerance,
        epsilon_factor,
        final_datum_defect_k: matrix_norm(model.basis(), &defect, Norm::K),
        distance_at_final: op_norm(&defect),
        controlled: epsilon_factor.is_finite(),
        rows,
    })
}

/// Lyapunov solve for a source that is only assumed to have finite `K` norm.
pub fn weak_source_solve(model: &CoefficientModel, settings: &SolverSettings) -> Result<BackwardSolution> {
    let basis = model.basis();
    for i in 0..=model.grid().steps() {
        for w in model.probe_points(i) {
            let s = &model.at(i, w)?.s;
            let k = matrix_norm(basis, s, Norm::K);
            if !k.is_finite() {
                return Err(Error::BoundViolation {
                    quantity: "|S|_K".into(),
                    value: k,
                    bound: f64::MAX,
                    time: model.grid().time(i),
                });
            }
        }
    }
    let mut sol = lyapunov_representation_solve(model, settings)?;
    sol.meta.method = "weak-source".into();
    Ok(sol)
}

#[derive(Debug, Clone, Serialize)]
pub struct KNormBoundReport {
    pub samples: usize,
    /// Largest `|S|_K / bound` with the bound `sqrt(2 Σλ^{-2ρ}) sup_x |H|`.
    pub max_ratio_sup: f64,
    /// Largest `|S|_K / bound` with the bound `sqrt(2 Σλ^{-2ρ}) sqrt(2/π) |H|_{L²}`.
    pub max_ratio_l2: f64,
    pub sup_bound_holds: bool,
    pub l2_bound_holds: bool,
}

/// Checks the truncated `K`-norm bound of a multiplication (or scalar)
/// source along every grid time of every path.
pub fn k_norm_bound_check(model: &CoefficientModel, paths: &[BrownianPath]) -> Result<KNormBoundReport> {
    let basis = model.basis();
    let factor = (2.0 * basis.tail_weight()).sqrt();
    let field = match model.kind() {
        ModelKind::ScalarRandomField { s, .. } => s.clone(),
        ModelKind::ConstantDiagonal { s, .. } => {
            SourceField::Scalar(crate::expr::Expr::constant(s.iter().fold(0.0_f64, |m, v| m.max(v.abs()))))
        }
        ModelKind::DeterministicSchedule { .. } => {
            return Err(Error::InvalidConfig("K-norm bound check needs a field source".into()))
        }
    };
    let (xs, ws) = crate::stats::gauss_legendre((8 * basis.n()).max(96), 0.0, std::f64::consts::PI);
    let grid = model.grid();
    let per_path: Vec<(f64, f64)> = paths
        .par_iter()
        .map(|p| {
            let mut rs = 0.0_f64;
            let mut rl = 0.0_f64;
            for i in 0..=grid.steps() {
                let t = grid.time(i);
                let w = p.w(i);
                let s = &model.at(i, w)?.s;
                let k = matrix_norm(basis, s, Norm::K);
                let (sup, l2) = match &field {
                    SourceField::Scalar(e) => {
                        let v = e.eval(t, w, 0.0).abs();
                        (v, v * std::f64::consts::PI.sqrt())
                    }
                    SourceField::Multiplication(e) => {
                        let vals: Vec<f64> = xs.iter().map(|x| e.eval(t, w, *x)).collect();
                        let sup = vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                        let l2 = vals.iter().zip(&ws).map(|(v, q)| q * v * v).sum::<f64>().sqrt();
                        (sup, l2)
                    }
                };
                let b_sup = factor * sup;
                let b_l2 = factor * (2.0 / std::f64::consts::PI).sqrt() * l2;
                if k > 0.0 {
                    rs = rs.max(k / b_sup);
                    rl = rl.max(k / b_l2);
                }
            }
            Ok((rs, rl))
        })
        .collect::<Result<_>>()?;
    let max_ratio_sup = per_path.iter().fold(0.0_f64, |m, r| m.max(r.0));
    let max_ratio_l2 = per_path.iter().fold(0.0_f64, |m, r| m.max(r.1));
    let slack = 1.0 + 1e-10;
    Ok(KNormBoundReport {
        samples: paths.len() * (grid.steps() + 1),
        max_ratio_sup,
        max_ratio_l2,
        sup_bound_holds: max_ratio_sup <= slack,
        l2_bound_holds: max_ratio_l2 <= slack,
    })
}
