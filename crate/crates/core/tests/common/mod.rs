#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use bsre::coefficients::{Bounds, CoefficientModel, ModelKind, SourceField, TimeGrid};
use bsre::config::ExperimentConfig;
use bsre::expr::Expr;
use bsre::spectral::laplacian_basis;

pub fn diagonal(n: usize, t_final: f64, steps: usize, c: f64, b: f64, s: f64, m: f64) -> CoefficientModel {
    diagonal_modes(n, t_final, steps, &vec![c; n], &vec![b; n], &vec![s; n], &vec![m; n])
}

pub fn diagonal_modes(
    n: usize,
    t_final: f64,
    steps: usize,
    c: &[f64],
    b: &[f64],
    s: &[f64],
    m: &[f64],
) -> CoefficientModel {
    let basis = Arc::new(laplacian_basis(n, 0.4).unwrap());
    let grid = TimeGrid::new(t_final, steps).unwrap();
    let kind = ModelKind::ConstantDiagonal {
        c: c.to_vec(),
        b: b.to_vec(),
        s: s.to_vec(),
        m: m.to_vec(),
    };
    let mc = c.iter().fold(0.1_f64, |a, v| a.max(v.abs()));
    let mb = b.iter().fold(0.1_f64, |a, v| a.max(v.abs()));
    CoefficientModel::new(basis, grid, kind, Bounds { m_c: mc, m_b: mb, m_s: None }).unwrap()
}

pub fn random_field(n: usize, steps: usize, c: &str, b: &str, s: SourceField, m: f64, bounds: Bounds) -> CoefficientModel {
    let basis = Arc::new(laplacian_basis(n, 0.4).unwrap());
    let grid = TimeGrid::new(1.0, steps).unwrap();
    let kind = ModelKind::ScalarRandomField {
        c: Expr::parse(c).unwrap(),
        b: Expr::parse(b).unwrap(),
        s,
        m: vec![m; n],
    };
    CoefficientModel::new(basis, grid, kind, bounds).unwrap()
}

/// `p(τ)` for `dp/dτ = a p + s`, `p(0) = m`.
pub fn linear_mode(a: f64, s: f64, m: f64, tau: f64) -> f64 {
    if a == 0.0 {
        m + s * tau
    } else {
        let e = (a * tau).exp();
        m * e + s * (e - 1.0) / a
    }
}

/// Diagonal entry of the Lyapunov solution for constant scalar data:
/// `-P' = (c² - 2λ)P + s`, `P(T) = m`.
pub fn lyapunov_mode(lambda: f64, c: f64, s: f64, m: f64, tau: f64) -> f64 {
    linear_mode(c * c - 2.0 * lambda, s, m, tau)
}

/// Closed form of `dp/dτ = a p - b² p² + s`, `p(0) = m`, from the two roots
/// of the right-hand side.
pub fn riccati_mode(lambda: f64, c: f64, b: f64, s: f64, m: f64, tau: f64) -> f64 {
    let a = c * c - 2.0 * lambda;
    if b == 0.0 {
        return linear_mode(a, s, m, tau);
    }
    let b2 = b * b;
    let d = (a * a + 4.0 * b2 * s).sqrt();
    let p1 = (a + d) / (2.0 * b2);
    let p2 = (a - d) / (2.0 * b2);
    let k = (m - p1) / (m - p2);
    let e = k * (-d * tau).exp();
    (p1 - p2 * e) / (1.0 - e)
}

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn shipped_configs() -> Vec<(String, ExperimentConfig)> {
    let mut out: Vec<(String, ExperimentConfig)> = std::fs::read_dir(configs_dir())
        .unwrap()
        .filter_map(|e| {
            let p = e.unwrap().path();
            (p.extension()? == "toml").then(|| {
                let name = p.file_stem().unwrap().to_string_lossy().into_owned();
                (name, ExperimentConfig::load(&p).unwrap())
            })
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}
