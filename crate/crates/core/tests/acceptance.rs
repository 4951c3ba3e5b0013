//! Acceptance suite. Prints one pass/fail line per criterion and exits
//! nonzero when any criterion fails.

mod common;

use std::time::Instant;

use bsre::cli::{run_config, Command};
use bsre::coefficients::{derive_seed, sample_paths, streams, validate_model, ModelKind};
use bsre::config::ExperimentConfig;
use bsre::control::{suboptimality_probe, value_check, Challenger};
use bsre::lyapunov::{
    apriori_audit, jn_stability_audit, k_norm_bound_check, lyapunov_representation_solve, picard_solve,
    weak_source_solve, BackwardSolution, PicardConfig, SolverSettings,
};
use bsre::riccati::{diagonal_oracle, riccati_solve, ModeData, RiccatiConfig};
use bsre::spectral::{jn_property_audit, laplacian_basis, log_grid, matrix_norm, smoothing_audit, Norm};
use common::*;
use nalgebra::{DMatrix, DVector};

const ORACLE_REL_TOL: f64 = 1e-4;
const ORACLE_TIME_LIMIT: f64 = 10.0;
const CLOSED_FORM_TOL: f64 = 1e-8;
const VALUE_Z: f64 = 3.0;
const VALUE_PATHS: usize = 10_000;
const VALUE_TIME_LIMIT: f64 = 120.0;
const PSD_TOL: f64 = 1e-10;
const MAX_HALVINGS: usize = 5;
const SMOOTHING_TOL: f64 = 1e-3;
const K_IDENTITY_TOL: f64 = 1e-12;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(format!("{name}.toml"))).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let model = diagonal(4, 1.0, 1000, 0.0, 1.0, 1.0, 0.0);
    let sol = riccati_solve(&model, &SolverSettings::exact(), &RiccatiConfig::default()).unwrap();
    let mut worst = 0.0_f64;
    let mut worst_closed = 0.0_f64;
    for k in 0..4 {
        let lambda = ((k + 1) * (k + 1)) as f64;
        let mode = ModeData { lambda, c: 0.0, b: 1.0, s: 1.0, m: 0.0 };
        let oracle = diagonal_oracle(mode, 1.0, &[0.0]).unwrap()[0];
        let p = sol.p_mean(0)[(k, k)];
        worst = worst.max((p - oracle).abs() / oracle);
        let closed = riccati_mode(lambda, 0.0, 1.0, 1.0, 0.0, 1.0);
        worst_closed = worst_closed.max((p - closed).abs() / closed);
    }
    let elapsed = start.elapsed().as_secs_f64();
    outcome(
        worst <= ORACLE_REL_TOL && worst_closed <= ORACLE_REL_TOL && elapsed < ORACLE_TIME_LIMIT,
        format!("max rel error vs RK45 {worst:.2e}, vs closed form {worst_closed:.2e}, {elapsed:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut worst = 0.0_f64;
    for steps in [100, 1000] {
        let model = diagonal_modes(4, 1.0, steps, &[0.0; 4], &[0.0; 4], &[0.0, 0.5, 1.0, 2.0], &[1.0; 4]);
        for sol in [
            lyapunov_representation_solve(&model, &SolverSettings::exact()).unwrap(),
            picard_solve(&model, &SolverSettings::exact(), &PicardConfig::default()).unwrap(),
        ] {
            for (k, s) in [0.0, 0.5, 1.0, 2.0].iter().enumerate() {
                let lambda = ((k + 1) * (k + 1)) as f64;
                let exact = lyapunov_mode(lambda, 0.0, *s, 1.0, 1.0);
                worst = worst.max((sol.p_mean(0)[(k, k)] - exact).abs());
            }
        }
    }
    let model = diagonal(1, 1.0, 1000, 0.0, 0.0, 0.0, 1.0);
    let p1 = lyapunov_representation_solve(&model, &SolverSettings::exact()).unwrap().p_mean(0)[(0, 0)];
    let e2 = (-2.0_f64).exp();
    outcome(
        worst <= CLOSED_FORM_TOL && (p1 - e2).abs() <= CLOSED_FORM_TOL,
        format!("P_1(0) = {p1:.12} vs e^-2 = {e2:.12}, max abs error {worst:.2e}"),
    )
}

fn value_instance() -> (bsre::coefficients::CoefficientModel, BackwardSolution) {
    let model = diagonal(4, 1.0, 1000, 0.3, 0.5, 1.0, 1.0);
    let sol = riccati_solve(&model, &SolverSettings::exact(), &RiccatiConfig::default()).unwrap();
    (model, sol)
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let (model, sol) = value_instance();
    let x = DVector::from_fn(4, |k, _| if k == 0 { 1.0 } else { 0.0 });
    let r = value_check(&x, &sol, &model, VALUE_PATHS, 20240603).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let diff = (r.mean_cost - r.predicted).abs();
    outcome(
        diff <= VALUE_Z * r.std_error && elapsed < VALUE_TIME_LIMIT,
        format!(
            "mean cost {:.6} vs <P(0)x,x> {:.6}, |z| = {:.2}, {elapsed:.1}s",
            r.mean_cost,
            r.predicted,
            r.z_score.abs()
        ),
    )
}

fn criterion_4() -> Outcome {
    let (model, sol) = value_instance();
    let x = DVector::from_fn(4, |k, _| if k == 0 { 1.0 } else { 0.0 });
    let r = suboptimality_probe(&x, &sol, &model, &[Challenger::Zero], VALUE_PATHS, 20240603).unwrap();
    let zero = &r.challengers[0];
    let combined = (zero.std_error.powi(2) + r.feedback_std_error.powi(2)).sqrt();
    outcome(
        zero.difference > 3.0 * combined && zero.difference > 3.0 * zero.difference_std_error,
        format!(
            "zero-control excess {:.5}, combined SE {:.2e}, paired SE {:.2e}",
            zero.difference, combined, zero.difference_std_error
        ),
    )
}

struct Shipped {
    cfg: ExperimentConfig,
    model: bsre::coefficients::CoefficientModel,
    lyapunov: BackwardSolution,
    riccati: Option<BackwardSolution>,
}

fn shipped_solutions() -> Vec<Shipped> {
    shipped_configs()
        .into_iter()
        .map(|(_, cfg)| {
            let model = cfg.build_model().unwrap();
            let report = validate_model(&model);
            let lyapunov = if report.s_bounded {
                picard_solve(&model, &cfg.solver_settings(), &cfg.picard_config()).unwrap()
            } else {
                weak_source_solve(&model, &cfg.solver_settings()).unwrap()
            };
            let riccati = report
                .a3
                .then(|| riccati_solve(&model, &cfg.solver_settings(), &cfg.riccati_config()).unwrap());
            Shipped {
                cfg,
                model,
                lyapunov,
                riccati,
            }
        })
        .collect()
}

fn criterion_5(shipped: &[Shipped]) -> Outcome {
    let mut ok = true;
    let mut worst_eig = f64::INFINITY;
    let mut worst_asym = 0.0_f64;
    let mut count = 0;
    for s in shipped {
        for sol in std::iter::once(&s.lyapunov).chain(s.riccati.as_ref()) {
            let asym = sol.max_asymmetry();
            let eig = sol.min_eigenvalue();
            worst_eig = worst_eig.min(eig);
            worst_asym = worst_asym.max(asym);
            ok &= asym == 0.0 && eig >= -PSD_TOL;
            count += 1;
        }
    }
    outcome(
        ok,
        format!("{count} solutions on {} instances, max asymmetry {worst_asym:e}, min eigenvalue {worst_eig:.3e}", shipped.len()),
    )
}

fn criterion_6(shipped: &[Shipped]) -> Outcome {
    let mut ok = true;
    let mut worst_ratio = 0.0_f64;
    let mut max_halvings = 0;
    let mut windows = 0;
    for s in shipped {
        for sol in std::iter::once(&s.lyapunov).chain(s.riccati.as_ref()) {
            for w in &sol.meta.windows {
                windows += 1;
                for r in &w.ratios {
                    worst_ratio = worst_ratio.max(*r);
                    ok &= *r < 1.0;
                }
            }
            max_halvings = max_halvings.max(sol.meta.halvings);
        }
    }
    ok &= max_halvings <= MAX_HALVINGS;
    outcome(
        ok,
        format!("{windows} windows, max ratio {worst_ratio:.3e}, max halvings {max_halvings}"),
    )
}

fn criterion_7() -> Outcome {
    let rho = 0.4;
    let basis = laplacian_basis(4, rho).unwrap();
    let r = smoothing_audit(&basis, &log_grid(1e-6, 1.0, 4001)).unwrap();
    let analytic = (rho / std::f64::consts::E).powf(rho);
    let smooth_ok = r.observed_max <= 1.0 && (r.observed_max - analytic).abs() <= SMOOTHING_TOL;
    let weights: f64 = (1..=4).map(|k| ((k * k) as f64).powf(-2.0 * rho)).sum();
    let expected = (2.0 * weights).sqrt();
    let k_id = matrix_norm(&basis, &DMatrix::identity(4, 4), Norm::K);
    let k_ok = (k_id - expected).abs() <= K_IDENTITY_TOL;
    let jn = jn_property_audit(&basis, &[1.0, 10.0, 100.0]).unwrap();
    let jn_ok = jn.len() == 3 && jn.iter().all(|r| r.all_hold && r.checks.len() >= 5);
    outcome(
        smooth_ok && k_ok && jn_ok,
        format!(
            "smoothing max {:.6} vs (rho/e)^rho {analytic:.6}; |I|_K {k_id:.15} vs {expected:.15}; J_n properties {}",
            r.observed_max,
            if jn_ok { "hold" } else { "fail" }
        ),
    )
}

fn criterion_8() -> Outcome {
    let model = load("riccati-reference").build_model().unwrap();
    let r = jn_stability_audit(&model, &[4.0, 16.0, 64.0, 256.0], 0.0, 1.0, 1.0).unwrap();
    let distances: Vec<String> = r.rows.iter().map(|row| format!("{:.3e}", row.distance)).collect();
    let strictly = r.rows.windows(2).all(|w| w[1].distance < w[0].distance);
    outcome(r.decreasing && strictly, format!("distances {}", distances.join(" > ")))
}

fn criterion_9(shipped: &[Shipped]) -> Outcome {
    let mut ok = true;
    let mut notes = Vec::new();
    for s in shipped {
        let weak = !validate_model(&s.model).s_bounded;
        let deltas: Vec<f64> = s.cfg.verify.apriori_deltas.iter().map(|d| d.min(s.cfg.grid.t_final)).collect();
        let r = apriori_audit(&s.lyapunov, &s.model, &deltas, weak).unwrap();
        ok &= r.lhs_finite;
    }
    let cfg = load("multiplication-source");
    let model = cfg.build_model().unwrap();
    let is_multiplication = matches!(
        model.kind(),
        ModelKind::ScalarRandomField { s: bsre::coefficients::SourceField::Multiplication(_), .. }
    );
    let weak_sol = weak_source_solve(&model, &cfg.solver_settings());
    let completes = weak_sol.as_ref().is_ok_and(|s| s.sup_norm().is_finite());
    let paths = sample_paths(model.grid(), cfg.verify.k_norm_paths, derive_seed(cfg.seed, streams::AUDIT)).unwrap();
    let bound = k_norm_bound_check(&model, &paths).unwrap();
    ok &= is_multiplication && completes && bound.l2_bound_holds;
    notes.push(format!(
        "a-priori LHS finite on {} instances; weak-source solve {}; K-norm bound max ratio {:.3} over {} samples",
        shipped.len(),
        if completes { "completes" } else { "fails" },
        bound.max_ratio_l2,
        bound.samples
    ));
    outcome(ok, notes.join("; "))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut reports = Vec::new();
    for w in [1, 2, 8] {
        let mut cfg = load("random-field");
        cfg.workers = Some(w);
        cfg.output.dir = dir.path().join(w.to_string());
        let out = run_config(Command::Verify, &cfg).unwrap();
        reports.push(std::fs::read(&out.files[0]).unwrap());
    }
    let identical = reports.windows(2).all(|w| w[0] == w[1]);
    outcome(
        identical,
        format!("verify.json of {} bytes identical across 1, 2 and 8 workers: {identical}", reports[0].len()),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, title: &'static str, o: Outcome| {
        println!("criterion {id:>2} [{}] {title}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, title, o));
    };
    record(1, "diagonal Riccati oracle agreement", criterion_1());
    record(2, "Lyapunov closed form", criterion_2());
    record(3, "value-function identity", criterion_3());
    record(4, "optimality probe", criterion_4());
    let shipped = shipped_solutions();
    record(5, "positivity and symmetry", criterion_5(&shipped));
    record(6, "contraction diagnostics", criterion_6(&shipped));
    record(7, "functional-analytic audits", criterion_7());
    record(8, "J_n stability", criterion_8());
    record(9, "a-priori audit", criterion_9(&shipped));
    record(10, "determinism across workers", criterion_10());
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("acceptance: {} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
