mod common;

use bsre::coefficients::{sample_paths, TimeGrid};
use bsre::control::value_check;
use bsre::flow::weak_order_audit;
use bsre::lyapunov::{lyapunov_representation_solve, picard_solve, PicardConfig, SolverSettings};
use bsre::riccati::{diagonal_oracle, riccati_solve, ModeData, RiccatiConfig};
use bsre::stats::Estimate;
use common::*;
use nalgebra::DVector;

#[test]
fn lyapunov_matches_closed_form_with_noise() {
    let (c, s, m) = (0.5, 0.7, 1.3);
    let model = diagonal(4, 1.0, 200, c, 0.0, s, m);
    let rep = lyapunov_representation_solve(&model, &SolverSettings::exact()).unwrap();
    let pic = picard_solve(&model, &SolverSettings::exact(), &PicardConfig::default()).unwrap();
    let grid = model.grid();
    for i in [0, 57, 199, 200] {
        let tau = 1.0 - grid.time(i);
        for k in 0..4 {
            let lambda = ((k + 1) * (k + 1)) as f64;
            let exact = lyapunov_mode(lambda, c, s, m, tau);
            assert!((rep.p_mean(i)[(k, k)] - exact).abs() < 1e-10 * exact.max(1.0));
            let e = (pic.p_mean(i)[(k, k)] - exact).abs() / exact.max(1.0);
            assert!(e < 1e-5, "picard {e}");
        }
    }
}

#[test]
fn riccati_matches_closed_form() {
    let model = diagonal_modes(3, 1.0, 1000, &[0.0, 0.3, 0.2], &[1.0, 0.5, 2.0], &[1.0, 2.0, 0.5], &[0.0, 1.0, 0.3]);
    let sol = riccati_solve(&model, &SolverSettings::exact(), &RiccatiConfig::default()).unwrap();
    let modes = [(1.0, 0.0, 1.0, 1.0, 0.0), (4.0, 0.3, 0.5, 2.0, 1.0), (9.0, 0.2, 2.0, 0.5, 0.3)];
    for (k, &(lambda, c, b, s, m)) in modes.iter().enumerate() {
        for i in [0, 500, 999] {
            let tau = 1.0 - model.grid().time(i);
            let exact = riccati_mode(lambda, c, b, s, m, tau);
            let got = sol.p_mean(i)[(k, k)];
            assert!((got - exact).abs() <= 1e-5 * exact.abs(), "mode {k} step {i}: {got} vs {exact}");
        }
    }
}

#[test]
fn rk45_oracle_matches_closed_form() {
    let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();
    for &(lambda, c, b, s, m) in &[(1.0, 0.0, 1.0, 1.0, 0.0), (4.0, 0.5, 0.3, 2.0, 1.5), (0.5, 1.0, 2.0, 0.1, 3.0)] {
        let got = diagonal_oracle(ModeData { lambda, c, b, s, m }, 2.0, &times).unwrap();
        for (t, p) in times.iter().zip(&got) {
            let exact = riccati_mode(lambda, c, b, s, m, 2.0 - t);
            assert!((p - exact).abs() <= 1e-8 * exact.abs().max(1e-3));
        }
    }
}

#[test]
fn brownian_terminal_moments() {
    let grid = TimeGrid::new(2.0, 50).unwrap();
    let n = 4000;
    let paths = sample_paths(&grid, n, 11).unwrap();
    let wt: Vec<f64> = paths.iter().map(|p| p.w(50)).collect();
    let mean = Estimate::from_samples(&wt);
    assert!(mean.mean.abs() <= 3.0 * (2.0 / n as f64).sqrt());
    let sq: Vec<f64> = wt.iter().map(|w| w * w).collect();
    let var = Estimate::from_samples(&sq);
    assert!((var.mean - 2.0).abs() <= 3.0 * var.std_error);
}

#[test]
fn deterministic_cost_equals_value_up_to_quadrature() {
    for steps in [100, 400] {
        let model = diagonal(3, 1.0, steps, 0.0, 0.0, 1.0, 0.5);
        let sol = lyapunov_representation_solve(&model, &SolverSettings::exact()).unwrap();
        let x = DVector::from_vec(vec![1.0, 0.5, -0.2]);
        let r = value_check(&x, &sol, &model, 1000, 3).unwrap();
        let exact: f64 = (0..3)
            .map(|k| lyapunov_mode(((k + 1) * (k + 1)) as f64, 0.0, 1.0, 0.5, 1.0) * x[k] * x[k])
            .sum();
        assert!((r.predicted - exact).abs() < 1e-10);
        assert!(r.std_error < 1e-12);
        let h = 1.0 / steps as f64;
        assert!((r.mean_cost - exact).abs() <= 10.0 * h * exact, "h = {h}");
    }
}

#[test]
fn scheme_weak_error_decreases() {
    let r = weak_order_audit(1.0, 0.8, 1.0, 1.0, 4, 3, 20_000, 5).unwrap();
    assert!(r.monotone, "{:?}", r.errors);
}
