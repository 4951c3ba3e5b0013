mod common;

use std::sync::Arc;

use bsre::coefficients::{BrownianPath, TimeGrid};
use bsre::config::ExperimentConfig;
use bsre::flow::{flow, propagate, ZeroControl};
use bsre::lyapunov::{lyapunov_representation_solve, SolverSettings};
use bsre::regression::{regress, RegressionConfig};
use bsre::riccati::{riccati_solve, RiccatiConfig};
use bsre::spectral::{jn_conjugate, laplacian_basis, matrix_norm, min_eigenvalue, op_norm, semigroup_conjugate, Norm, OperatorMatrix};
use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn symmetric(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-2.0..2.0f64, n * n).prop_map(move |v| {
        let m = DMatrix::from_vec(n, n, v);
        (&m + m.transpose()) * 0.5
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn norms_are_seminorms(a in symmetric(4), b in symmetric(4), alpha in -3.0..3.0f64) {
        let basis = laplacian_basis(4, 0.4).unwrap();
        for which in [Norm::OpH, Norm::K, Norm::Ks, Norm::HS] {
            let na = matrix_norm(&basis, &a, which);
            let nb = matrix_norm(&basis, &b, which);
            prop_assert!(matrix_norm(&basis, &(&a + &b), which) <= na + nb + 1e-12);
            prop_assert!((matrix_norm(&basis, &(&a * alpha), which) - alpha.abs() * na).abs() <= 1e-12 * (1.0 + na));
        }
        let k = matrix_norm(&basis, &a, Norm::K);
        prop_assert!(k <= (2.0 * basis.tail_weight()).sqrt() * op_norm(&a) + 1e-12);
    }

    #[test]
    fn conjugations_preserve_symmetry_and_shrink(a in symmetric(5), t in 0.0..2.0f64, n in 0.1..1e4f64) {
        let basis = Arc::new(laplacian_basis(5, 0.35).unwrap());
        let g = OperatorMatrix::symmetric(basis, a.clone()).unwrap();
        let s = semigroup_conjugate(&g, t).unwrap();
        let j = jn_conjugate(&g, n).unwrap();
        for out in [&s, &j] {
            prop_assert!(out.is_symmetric());
            prop_assert!(op_norm(out.entries()) <= op_norm(&a) + 1e-12);
        }
    }

    #[test]
    fn propagation_is_linear_and_matches_flow(
        x1 in prop::collection::vec(-1.0..1.0f64, 3),
        x2 in prop::collection::vec(-1.0..1.0f64, 3),
        alpha in -2.0..2.0f64,
        beta in -2.0..2.0f64,
        index in 0u64..1000,
    ) {
        let model = diagonal_modes(3, 1.0, 40, &[0.5, 0.2, 0.0], &[1.0; 3], &[1.0; 3], &[1.0; 3]);
        let path = BrownianPath::sample(*model.grid(), 5, index);
        let x1 = DVector::from_vec(x1);
        let x2 = DVector::from_vec(x2);
        let y1 = propagate(&x1, &ZeroControl, &model, &path).unwrap();
        let y2 = propagate(&x2, &ZeroControl, &model, &path).unwrap();
        let combo = propagate(&(&x1 * alpha + &x2 * beta), &ZeroControl, &model, &path).unwrap();
        for i in 0..=40 {
            let lin = &y1.states[i] * alpha + &y2.states[i] * beta;
            let scale = 1.0 + combo.states[i].norm();
            prop_assert!((&lin - &combo.states[i]).norm() <= 1e-12 * scale);
            let phi = flow(&model, &path, 0, i).unwrap();
            let via = phi.entries.entries() * &x1;
            prop_assert!((&via - &y1.states[i]).norm() <= 1e-12 * (1.0 + via.norm()));
        }
    }

    #[test]
    fn backward_solutions_are_symmetric_and_positive(
        c in prop::collection::vec(0.0..0.8f64, 3),
        b in prop::collection::vec(0.0..2.0f64, 3),
        s in prop::collection::vec(0.0..2.0f64, 3),
        m in prop::collection::vec(0.0..2.0f64, 3),
    ) {
        let model = diagonal_modes(3, 0.5, 50, &c, &b, &s, &m);
        let lyap = lyapunov_representation_solve(&model, &SolverSettings::exact()).unwrap();
        let ric = riccati_solve(&model, &SolverSettings::exact(), &RiccatiConfig::default()).unwrap();
        for sol in [&lyap, &ric] {
            prop_assert_eq!(sol.max_asymmetry(), 0.0);
            prop_assert!(sol.min_eigenvalue() >= -1e-10);
        }
        for i in 0..=50 {
            prop_assert!(min_eigenvalue(&(lyap.p_mean(i) - ric.p_mean(i))) >= -1e-10);
        }
    }

    #[test]
    fn regression_reproduces_low_degree_polynomials(coef in prop::collection::vec(-1.0..1.0f64, 5), t in 0.1..2.0f64) {
        let sd = t.sqrt();
        let ws: Vec<f64> = (0..60).map(|j| sd * (-3.0 + 6.0 * j as f64 / 59.0)).collect();
        let f = |w: f64| coef.iter().enumerate().map(|(d, a)| a * w.powi(d as i32)).sum::<f64>();
        let targets: Vec<DMatrix<f64>> = ws.iter().map(|w| DMatrix::from_element(1, 1, f(*w))).collect();
        let s = regress(&ws, &targets, sd, &RegressionConfig { degree: 4, ridge: 0.0 }).unwrap();
        for w in [-sd, 0.0, 0.7 * sd] {
            prop_assert!((s.eval(w)[(0, 0)] - f(w)).abs() < 1e-8);
        }
    }

    #[test]
    fn paths_depend_only_on_seed_and_index(seed in any::<u64>(), index in 0u64..1_000_000) {
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let a = BrownianPath::sample(grid, seed, index);
        let b = BrownianPath::sample(grid, seed, index);
        prop_assert_eq!(a.increments(), b.increments());
        prop_assert_eq!(a.w(0), 0.0);
    }

    #[test]
    fn configs_round_trip(
        seed in any::<u64>(),
        n in 1usize..6,
        rho in 0.26..0.49f64,
        steps in 1usize..5000,
        c in -1.0..1.0f64,
        m in prop::collection::vec(0.0..3.0f64, 1..6),
        delta in prop::option::of(0.01..1.0f64),
    ) {
        let m = if m.len() == n { format!("{m:?}") } else { format!("{}", m[0]) };
        let delta = delta.map(|d| format!("delta = {d:?}\n")).unwrap_or_default();
        let src = format!(
            "seed = {seed}\n[model]\nn = {n}\nrho = {rho:?}\nm = {m}\n[model.bounds]\nm_c = 1.0\nm_b = 1.0\n\
             [model.coefficients]\nvariant = \"constant-diagonal\"\nc = {c:?}\nb = 1.0\ns = 0.5\n\
             [grid]\nt_final = 1.0\nsteps = {steps}\n[solver]\n{delta}"
        );
        let cfg = ExperimentConfig::from_toml(&src).unwrap();
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(again.to_toml().unwrap(), cfg.to_toml().unwrap());
    }
}

#[test]
fn shipped_configs_round_trip() {
    for (name, cfg) in shipped_configs() {
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again, "{name}");
    }
}
