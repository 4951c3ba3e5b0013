//! Command orchestration behind the `bsre` binary.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use serde_json::{json, Value};

use crate::coefficients::{derive_seed, sample_paths, streams, validate_model, BrownianPath, CoefficientModel, ModelKind};
use crate::config::{Audit, ExperimentConfig, PolicyKind};
use crate::control::{
    completion_of_squares, predicted_value, random_open_loop, simulate_policy, suboptimality_probe, value_check,
    Challenger, FeedbackPolicy,
};
use crate::error::{Error, Result};
use crate::flow::{moment_audit, ZeroControl};
use crate::lyapunov::{
    apriori_audit, jn_stability_audit, k_norm_bound_check, picard_solve, weak_source_solve, BackwardSolution,
};
use crate::report::{csv, to_json, write_file};
use crate::riccati::{diagonal_oracle, riccati_solve, ModeData};
use crate::spectral::{jn_property_audit, log_grid, matrix_norm, min_eigenvalue, smoothing_audit, Norm};

/// Largest relative error accepted by `oracle-compare`.
pub const ORACLE_REL_TOL: f64 = 1e-4;
/// Tolerance of the smoothing supremum against `(ρ/e)^ρ`.
pub const SMOOTHING_TOL: f64 = 1e-3;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    SolveLyapunov,
    SolveRiccati,
    Simulate,
    Verify,
    OracleCompare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SolveLyapunov => "solve-lyapunov",
            Command::SolveRiccati => "solve-riccati",
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::OracleCompare => "oracle-compare",
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(w) = self.workers {
            cfg.workers = Some(w);
        }
        if let Some(o) = &self.out {
            cfg.output.dir = o.clone();
        }
    }
}

/// Files written and whether every check passed.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub files: Vec<PathBuf>,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig(_) | Error::Expression(_) | Error::Domain(_) | Error::BoundViolation { .. } | Error::Io(_) => {
            EXIT_CONFIG
        }
        Error::NonConvergence { .. }
        | Error::BallViolation { .. }
        | Error::SolverFailure(_)
        | Error::OracleFailure(_)
        | Error::ContractViolation(_) => EXIT_SOLVER,
    }
}

pub fn error_json(err: &Error) -> String {
    let v = json!({
        "error": err.kind(),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    });
    v.to_string()
}

/// Loads the config, runs `command` and returns the process exit status.
/// Failures are reported as one JSON line on stderr.
pub fn run(command: Command, config: &Path, overrides: &Overrides) -> i32 {
    let result = ExperimentConfig::load(config).and_then(|mut cfg| {
        overrides.apply(&mut cfg);
        cfg.validate()?;
        run_config(command, &cfg)
    });
    match result {
        Ok(o) if o.passed => EXIT_OK,
        Ok(_) => EXIT_VERIFICATION,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            exit_code(&e)
        }
    }
}

/// Runs `command` inside a worker pool of the configured size.
pub fn run_config(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    check_memory(command, cfg)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers {
        builder = builder.num_threads(w);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start worker pool: {e}")))?;
    pool.install(|| execute(command, cfg))
}

/// Estimated peak memory of `command` in MiB.
pub fn memory_estimate_mb(command: Command, cfg: &ExperimentConfig) -> f64 {
    let n2 = (cfg.model.n * cfg.model.n) as f64;
    let nodes = (cfg.grid.steps + 1) as f64;
    let path = 16.0 * nodes;
    let solution = 2.0 * 8.0 * n2 * nodes * (cfg.solver.regression_degree + 1) as f64;
    let solver = match cfg.solver.backend {
        crate::lyapunov::Backend::DeterministicExact => 3.0 * solution,
        crate::lyapunov::Backend::MonteCarlo => {
            cfg.solver.n_paths as f64 * (path + 6.0 * 8.0 * n2) + 3.0 * solution
        }
    };
    let ensemble = |n: usize| n as f64 * (path + 8.0 * 8.0 * n2);
    let bytes = match command {
        Command::SolveLyapunov | Command::SolveRiccati | Command::OracleCompare => solver,
        Command::Simulate => solver + ensemble(cfg.simulate.n_paths) + cfg.simulate.n_paths as f64 * nodes * 16.0 * cfg.model.n as f64,
        Command::Verify => {
            2.0 * solver
                + ensemble(cfg.verify.n_paths.max(cfg.verify.moment_paths).max(cfg.verify.k_norm_paths))
                + 16.0 * cfg.verify.n_paths as f64
        }
    };
    bytes / (1024.0 * 1024.0)
}

fn check_memory(command: Command, cfg: &ExperimentConfig) -> Result<()> {
    let mb = memory_estimate_mb(command, cfg);
    if mb > cfg.memory_budget_mb {
        return Err(Error::InvalidConfig(format!(
            "estimated memory {mb:.1} MiB exceeds memory_budget_mb = {}",
            cfg.memory_budget_mb
        )));
    }
    Ok(())
}

fn execute(command: Command, cfg: &ExperimentConfig) -> Result<Outcome> {
    let model = cfg.build_model()?;
    let dir = cfg.output.dir.clone();
    match command {
        Command::SolveLyapunov => {
            let sol = solve_lyapunov(cfg, &model)?;
            write_solution(&dir, "lyapunov", &sol)
        }
        Command::SolveRiccati => {
            let sol = riccati_solve(&model, &cfg.solver_settings(), &cfg.riccati_config())?;
            write_solution(&dir, "riccati", &sol)
        }
        Command::Simulate => simulate(cfg, &model, &dir),
        Command::Verify => {
            let report = verify(cfg, &model)?;
            let passed = report.passed;
            write_file(&dir, "verify.json", &to_json(&report)?)?;
            Ok(Outcome {
                passed,
                files: vec![dir.join("verify.json")],
            })
        }
        Command::OracleCompare => {
            let table = oracle_compare(cfg, &model)?;
            let rows: Vec<Vec<f64>> = table
                .modes
                .iter()
                .map(|m| vec![m.mode as f64, m.lambda, m.solver, m.oracle, m.rel_error_t0, m.max_rel_error])
                .collect();
            write_file(
                &dir,
                "oracle.csv",
                &csv(&["mode", "lambda", "p_solver_0", "p_oracle_0", "rel_error_0", "max_rel_error"], &rows),
            )?;
            write_file(&dir, "oracle.json", &to_json(&table)?)?;
            Ok(Outcome {
                passed: table.passed,
                files: vec![dir.join("oracle.csv"), dir.join("oracle.json")],
            })
        }
    }
}

fn solve_lyapunov(cfg: &ExperimentConfig, model: &CoefficientModel) -> Result<BackwardSolution> {
    let report = validate_model(model);
    if !report.s_bounded && report.a3_prime {
        weak_source_solve(model, &cfg.solver_settings())
    } else {
        picard_solve(model, &cfg.solver_settings(), &cfg.picard_config())
    }
}

#[derive(Debug, Clone, Serialize)]
struct SolutionSummary<'a> {
    meta: &'a crate::lyapunov::SolveMeta,
    min_eigenvalue: f64,
    max_asymmetry: f64,
    sup_norm: f64,
    p0_mean: Vec<Vec<f64>>,
    p0_std_error: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn write_solution(dir: &Path, stem: &str, sol: &BackwardSolution) -> Result<Outcome> {
    let summary = SolutionSummary {
        meta: &sol.meta,
        min_eigenvalue: sol.min_eigenvalue(),
        max_asymmetry: sol.max_asymmetry(),
        sup_norm: sol.sup_norm(),
        p0_mean: rows_of(sol.p_mean(0)),
        p0_std_error: sol.p0_std_error.as_ref().map(rows_of),
    };
    let csv_name = format!("{stem}_eigen.csv");
    let json_name = format!("{stem}.json");
    write_file(dir, &csv_name, &sol.eigen_csv())?;
    write_file(dir, &json_name, &to_json(&summary)?)?;
    Ok(Outcome {
        passed: true,
        files: vec![dir.join(csv_name), dir.join(json_name)],
    })
}

fn simulate(cfg: &ExperimentConfig, model: &CoefficientModel, dir: &Path) -> Result<Outcome> {
    let x = cfg.initial_state(cfg.simulate.x.as_ref())?;
    let paths = sample_paths(model.grid(), cfg.simulate.n_paths, derive_seed(cfg.seed, streams::SIMULATE))?;
    let solution = match cfg.simulate.policy {
        PolicyKind::Feedback => Some(riccati_solve(model, &cfg.solver_settings(), &cfg.riccati_config())?),
        PolicyKind::Zero => None,
    };
    let mut files = Vec::new();
    let mut rows = Vec::new();
    for path in &paths {
        let run = match &solution {
            Some(sol) => simulate_policy(&x, &FeedbackPolicy { solution: sol }, model, path)?,
            None => simulate_policy(&x, &ZeroControl, model, path)?,
        };
        let name = format!("trajectory_{:04}.csv", path.index());
        write_file(dir, &name, &run.trajectory.to_csv())?;
        files.push(dir.join(name));
        rows.push(vec![path.index() as f64, run.cost]);
    }
    write_file(dir, "costs.csv", &csv(&["path_index", "cost"], &rows))?;
    files.push(dir.join("costs.csv"));
    Ok(Outcome { passed: true, files })
}

/// Per-mode comparison of the solver with the scalar Riccati oracle.
#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub mode: usize,
    pub lambda: f64,
    pub solver: f64,
    pub oracle: f64,
    pub rel_error_t0: f64,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleTable {
    pub modes: Vec<OracleRow>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn rel_error(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / b.abs().max(f64::MIN_POSITIVE)
    }
}

/// Solver `P_kk(t_i)` against [`diagonal_oracle`] for every mode of a
/// constant-diagonal model. Relative errors are taken where the oracle
/// exceeds `1e-12` in magnitude and absolute errors elsewhere.
pub fn oracle_compare(cfg: &ExperimentConfig, model: &CoefficientModel) -> Result<OracleTable> {
    let ModelKind::ConstantDiagonal { c, b, s, m } = model.kind() else {
        return Err(Error::InvalidConfig("oracle-compare needs a constant-diagonal model".into()));
    };
    let sol = riccati_solve(model, &cfg.solver_settings(), &cfg.riccati_config())?;
    let grid = model.grid();
    let times = grid.times();
    let mut modes = Vec::new();
    for k in 0..model.basis().n() {
        let mode = ModeData {
            lambda: model.basis().lambda(k),
            c: c[k],
            b: b[k],
            s: s[k],
            m: m[k],
        };
        let oracle = diagonal_oracle(mode, grid.t_final(), &times)?;
        let err = |i: usize| {
            let p = sol.p_mean(i)[(k, k)];
            if oracle[i].abs() > 1e-12 {
                rel_error(p, oracle[i])
            } else {
                (p - oracle[i]).abs()
            }
        };
        let max_rel_error = (0..times.len()).map(err).fold(0.0, f64::max);
        modes.push(OracleRow {
            mode: k + 1,
            lambda: mode.lambda,
            solver: sol.p_mean(0)[(k, k)],
            oracle: oracle[0],
            rel_error_t0: err(0),
            max_rel_error,
        });
    }
    let max_rel_error = modes.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(OracleTable {
        passed: max_rel_error <= ORACLE_REL_TOL,
        modes,
        max_rel_error,
        tolerance: ORACLE_REL_TOL,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditResult {
    pub name: Audit,
    /// `"pass"`, `"fail"` or `"skipped"`.
    pub status: &'static str,
    pub detail: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub audits: Vec<AuditResult>,
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    serde_json::to_value(v).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn status(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "fail"
    }
}

/// Allowance for the `O(h)` bias of the left-endpoint cost quadrature:
/// `h (1 + λ_x) max(1, |v|)` with `λ_x` the Rayleigh quotient of `A` at `x`.
pub fn quadrature_allowance(model: &CoefficientModel, x: &DVector<f64>, value: f64) -> f64 {
    let norm2 = x.norm_squared();
    let lambda_x = if norm2 > 0.0 {
        x.iter()
            .zip(model.basis().lambdas())
            .map(|(v, l)| l * v * v)
            .sum::<f64>()
            / norm2
    } else {
        0.0
    };
    model.grid().h() * (1.0 + lambda_x) * value.abs().max(1.0)
}

fn window_diagnostics(sol: &BackwardSolution, max_halvings: usize) -> (bool, f64) {
    let max_ratio = sol
        .meta
        .windows
        .iter()
        .flat_map(|w| w.ratios.iter().copied())
        .fold(0.0, f64::max);
    (max_ratio < 1.0 && sol.meta.halvings <= max_halvings, max_ratio)
}

fn solution_checks(sol: &BackwardSolution, model: &CoefficientModel, psd_tol: f64, expect_psd: bool) -> (bool, Value) {
    let l = model.grid().steps();
    let final_exact = sol.p[l].is_constant() && sol.p_mean(l) == &model.final_datum();
    let asym = sol.max_asymmetry();
    let min_eig = sol.min_eigenvalue();
    let psd = !expect_psd || min_eig >= -psd_tol;
    let (contraction, max_ratio) = window_diagnostics(sol, crate::lyapunov::MAX_HALVINGS);
    let ok = final_exact && asym == 0.0 && psd && contraction && sol.sup_norm().is_finite();
    (
        ok,
        json!({
            "final_datum_exact": final_exact,
            "max_asymmetry": asym,
            "min_eigenvalue": min_eig,
            "psd_expected": expect_psd,
            "max_contraction_ratio": max_ratio,
            "halvings": sol.meta.halvings,
            "windows": sol.meta.windows.len(),
            "delta": sol.meta.delta,
            "sup_norm": sol.sup_norm(),
        }),
    )
}

/// Runs the configured audits; audits that do not apply to the model are
/// reported as skipped.
pub fn verify(cfg: &ExperimentConfig, model: &CoefficientModel) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let settings = cfg.solver_settings();
    let basis = model.basis();
    let grid = model.grid();
    let x = cfg.initial_state(v.x.as_ref())?;
    let validation = validate_model(model);
    let weak = !validation.s_bounded;
    let needs = |a: Audit| v.audits.contains(&a);
    let lyapunov = if [Audit::Lyapunov, Audit::Apriori, Audit::Riccati].iter().any(|a| needs(*a)) {
        Some(solve_lyapunov(cfg, model)?)
    } else {
        None
    };
    let control_audits = [Audit::Riccati, Audit::Value, Audit::Probe, Audit::Completion, Audit::Homogeneity];
    let riccati = if validation.a3 && control_audits.iter().any(|a| needs(*a)) {
        Some(riccati_solve(model, &settings, &cfg.riccati_config())?)
    } else {
        None
    };
    let mut audits = Vec::new();
    for &audit in &v.audits {
        let skipped = |why: &str| AuditResult {
            name: audit,
            status: "skipped",
            detail: json!({ "reason": why }),
        };
        let result = match audit {
            Audit::Validate => {
                let ok = validation.a2 && validation.a4 && (validation.a3 || validation.a3_prime);
                AuditResult {
                    name: audit,
                    status: status(ok),
                    detail: to_value(&validation)?,
                }
            }
            Audit::Smoothing => {
                let t_max = grid.t_final().max(1.0);
                let ts = log_grid(1e-6 * t_max, t_max, 4001);
                let r = smoothing_audit(basis, &ts)?;
                let ok = r.within_bound && (r.observed_max - r.analytic_sup).abs() <= SMOOTHING_TOL;
                AuditResult {
                    name: audit,
                    status: status(ok),
                    detail: to_value(&r)?,
                }
            }
            Audit::KNormIdentity => {
                let id = nalgebra::DMatrix::identity(basis.n(), basis.n());
                let k = matrix_norm(basis, &id, Norm::K);
                let expected = (2.0 * basis.tail_weight()).sqrt();
                let ok = (k - expected).abs() <= 1e-12 * expected.max(1.0);
                AuditResult {
                    name: audit,
                    status: status(ok),
                    detail: json!({ "k_norm": k, "expected": expected }),
                }
            }
            Audit::JnProperties => {
                let r = jn_property_audit(basis, &[1.0, 10.0, 100.0])?;
                AuditResult {
                    name: audit,
                    status: status(r.iter().all(|x| x.all_hold)),
                    detail: to_value(&r)?,
                }
            }
            Audit::Lyapunov => {
                let sol = lyapunov.as_ref().expect("solved above");
                let (ok, detail) = solution_checks(sol, model, settings.psd_tol, validation.a3);
                AuditResult {
                    name: audit,
                    status: status(ok),
                    detail,
                }
            }
            Audit::Riccati => match &riccati {
                None => skipped("the model does not satisfy the positivity hypotheses"),
                Some(sol) => {
                    let (mut ok, mut detail) = solution_checks(sol, model, settings.psd_tol, true);
                    let radius = sol.meta.radius.unwrap_or(f64::INFINITY);
                    let within_ball = sol.sup_norm() <= radius;
                    ok &= within_ball;
                    detail["radius"] = json!(radius);
                    detail["within_ball"] = json!(within_ball);
                    detail["restart_bound_ok"] = json!(sol.meta.restart_bound_ok);
                    if model.is_deterministic() {
                        let lyap = lyapunov.as_ref().expect("solved above");
                        let gap = (0..=grid.steps())
                            .map(|i| min_eigenvalue(&(lyap.p_mean(i) - sol.p_mean(i))))
                            .fold(f64::INFINITY, f64::min);
                        let ordered = gap >= -settings.psd_tol;
                        ok &= ordered;
                        detail["lyapunov_minus_riccati_min_eigenvalue"] = json!(gap);
                    }
                    if matches!(model.kind(), ModelKind::ConstantDiagonal { .. }) {
                        let off = (0..=grid.steps())
                            .map(|i| {
                                let p = sol.p_mean(i);
                                let d = nalgebra::DMatrix::from_diagonal(&p.diagonal());
                                (p - d).amax()
                            })
                            .fold(0.0, f64::max);
                        ok &= off <= 1e-10;
                        detail["max_off_diagonal"] = json!(off);
                    }
                    AuditResult {
                        name: audit,
                        status: status(ok),
                        detail,
                    }
                }
            },
            Audit::Oracle => {
                if !matches!(model.kind(), ModelKind::ConstantDiagonal { .. }) {
                    skipped("the oracle needs a constant-diagonal model")
                } else {
                    let t = oracle_compare(cfg, model)?;
                    AuditResult {
                        name: audit,
                        status: status(t.passed),
                        detail: to_value(&t)?,
                    }
                }
            }
            Audit::Moments => {
                let r = moment_audit(model, &x, &ZeroControl, v.moment_paths, cfg.seed)?;
                let ok = r.sup_second_moment.is_finite() && r.ratio.is_none_or(f64::is_finite);
                AuditResult {
                    name: audit,
                    status: status(ok),
                    detail: to_value(&r)?,
                }
            }
            Audit::Value => match &riccati {
                None => skipped("no Riccati solution for this model"),
                Some(sol) => {
                    let r = value_check(&x, sol, model, v.n_paths, cfg.seed)?;
                    let allowance = quadrature_allowance(model, &x, r.predicted);
                    let ok = (r.mean_cost - r.predicted).abs() <= 3.0 * r.std_error + allowance;
                    let mut detail = to_value(&r)?;
                    detail["quadrature_allowance"] = json!(allowance);
                    AuditResult {
                        name: audit,
                        status: status(ok),
                        detail,
                    }
                }
            },
            Audit::Probe => match &riccati {
                None => skipped("no Riccati solution for this model"),
                Some(sol) => {
                    let mut challengers = vec![Challenger::Zero];
                    challengers.extend(v.challenger_seeds.iter().map(|s| Challenger::RandomOpenLoop {
                        seed: *s,
                        amplitude: v.challenger_amplitude,
                    }));
                    challengers.push(Challenger::Feedback);
                    let r = suboptimality_probe(&x, sol, model, &challengers, v.n_paths, cfg.seed)?;
                    let self_diff = r.challengers.last().map(|c| c.difference);
                    let ok = r.passed && self_diff == Some(0.0);
                    AuditResult {
                        name: audit,
                        status: status(ok),
                        detail: to_value(&r)?,
                    }
                }
            },
            Audit::Completion => match &riccati {
                None => skipped("no Riccati solution for this model"),
                Some(sol) => {
                    let mut rows = vec![completion_of_squares(&x, sol, model, &ZeroControl, v.n_paths, cfg.seed)?];
                    for s in &v.challenger_seeds {
                        let pol = random_open_loop(model, *s, v.challenger_amplitude);
                        rows.push(completion_of_squares(&x, sol, model, &pol, v.n_paths, cfg.seed)?);
                    }
                    let allowance = quadrature_allowance(model, &x, predicted_value(sol, &x));
                    let ok = rows.iter().all(|r| r.mean_residual.abs() <= 3.0 * r.std_error + allowance);
                    AuditResult {
                        name: audit,
                        status: status(ok),
                        detail: json!({ "rows": to_value(&rows)?, "quadrature_allowance": allowance }),
                    }
                }
            },
            Audit::Homogeneity => match &riccati {
                None => skipped("no Riccati solution for this model"),
                Some(sol) => {
                    let r = homogeneity_check(&x, sol, model, cfg.seed)?;
                    AuditResult {
                        name: audit,
                        status: status(r.value_exact && r.costs_exact),
                        detail: to_value(&r)?,
                    }
                }
            },
            Audit::Apriori => {
                let sol = lyapunov.as_ref().expect("solved above");
                let deltas: Vec<f64> = v.apriori_deltas.iter().map(|d| d.min(grid.t_final())).collect();
                let r = apriori_audit(sol, model, &deltas, weak)?;
                AuditResult {
                    name: audit,
                    status: status(r.lhs_finite),
                    detail: to_value(&r)?,
                }
            }
            Audit::JnStability => {
                if !model.is_deterministic() {
                    skipped("the regularized comparison needs deterministic coefficients")
                } else {
                    let delta = v.jn_delta.unwrap_or(grid.t_final()).min(grid.t_final());
                    let r = jn_stability_audit(model, &v.jn_ns, v.jn_epsilon, delta, v.jn_tolerance)?;
                    AuditResult {
                        name: audit,
                        status: status(r.decreasing),
                        detail: to_value(&r)?,
                    }
                }
            }
            Audit::KNormBound => {
                if !matches!(model.kind(), ModelKind::ScalarRandomField { .. }) {
                    skipped("the bound concerns field sources")
                } else {
                    let paths = audit_paths(model, v.k_norm_paths, cfg.seed)?;
                    let r = k_norm_bound_check(model, &paths)?;
                    let ok = if weak { r.l2_bound_holds } else { r.sup_bound_holds };
                    AuditResult {
                        name: audit,
                        status: status(ok),
                        detail: to_value(&r)?,
                    }
                }
            }
            Audit::WeakSource => {
                if !weak {
                    skipped("the source is bounded")
                } else {
                    let sol = weak_source_solve(model, &settings)?;
                    let r = apriori_audit(&sol, model, &[grid.t_final()], true)?;
                    AuditResult {
                        name: audit,
                        status: status(r.lhs_finite && sol.sup_norm().is_finite()),
                        detail: json!({ "apriori": to_value(&r)?, "sup_norm": sol.sup_norm() }),
                    }
                }
            }
        };
        audits.push(result);
    }
    Ok(VerifyReport {
        seed: cfg.seed,
        passed: audits.iter().all(|a| a.status != "fail"),
        audits,
    })
}

fn audit_paths(model: &CoefficientModel, n: usize, seed: u64) -> Result<Vec<BrownianPath>> {
    sample_paths(model.grid(), n, derive_seed(seed, streams::AUDIT))
}

#[derive(Debug, Clone, Serialize)]
pub struct HomogeneityReport {
    pub alpha: f64,
    pub value: f64,
    pub scaled_value: f64,
    pub value_exact: bool,
    pub paths: usize,
    pub costs_exact: bool,
}

/// Degree-two homogeneity with `α = 2` of the value and of the closed-loop
/// cost on fixed paths.
pub fn homogeneity_check(
    x: &DVector<f64>,
    solution: &BackwardSolution,
    model: &CoefficientModel,
    seed: u64,
) -> Result<HomogeneityReport> {
    let alpha = 2.0;
    let ax = x * alpha;
    let value = predicted_value(solution, x);
    let scaled_value = predicted_value(solution, &ax);
    let paths = audit_paths(model, 64, seed)?;
    let fb = FeedbackPolicy { solution };
    let mut costs_exact = true;
    for p in &paths {
        let a = simulate_policy(x, &fb, model, p)?;
        let b = simulate_policy(&ax, &fb, model, p)?;
        costs_exact &= b.cost == alpha * alpha * a.cost;
    }
    Ok(HomogeneityReport {
        alpha,
        value,
        scaled_value,
        value_exact: scaled_value == alpha * alpha * value,
        paths: paths.len(),
        costs_exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::InvalidConfig("x".into())), EXIT_CONFIG);
        assert_eq!(
            exit_code(&Error::NonConvergence {
                window_start: 0.0,
                iterations: 1,
                residuals: vec![]
            }),
            EXIT_SOLVER
        );
        let j: Value = serde_json::from_str(&error_json(&Error::InvalidConfig("rho".into()))).unwrap();
        assert_eq!(j["exit_code"], 2);
    }
}
