//! Eigenbasis representation of operators on the state space.
//!
//! Everything is expressed in the orthonormal eigenbasis `e_k` of the
//! generator `A`, with `A e_k = -λ_k e_k`. An operator `G` is stored as the
//! truncated coordinate matrix `G_{jk} = <G e_k, e_j>`, so the semigroup and
//! the resolvent regularizers `J_n = n (n - A)^{-1}` act by diagonal scaling.
//!
//! The fractional spaces `V = D((-A)^ρ)` and `V'` only enter through the
//! weights `λ_k^{-2ρ}` of the `K` and `K_s` norms.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Default smoothing exponent.
pub const DEFAULT_RHO: f64 = 0.4;

/// Default tolerance for positive semidefiniteness checks.
pub const DEFAULT_PSD_TOL: f64 = 1e-10;

/// Asymmetry above this level is reported when a matrix is symmetrized.
pub const ASYMMETRY_WARN: f64 = 1e-9;

/// Truncated spectral data of `-A`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralBasis {
    lambdas: Vec<f64>,
    rho: f64,
}

impl SpectralBasis {
    pub fn new(lambdas: Vec<f64>, rho: f64) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::InvalidConfig(
                "truncation level N must be at least 1".into(),
            ));
        }
        if !(rho > 0.25 && rho < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "rho = {rho} must lie in the open interval (1/4, 1/2)"
            )));
        }
        if !(lambdas[0] > 0.0) || lambdas.iter().any(|l| !l.is_finite()) {
            return Err(Error::InvalidConfig(
                "eigenvalues must be finite and strictly positive".into(),
            ));
        }
        if lambdas.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidConfig(
                "eigenvalues must be sorted nondecreasingly".into(),
            ));
        }
        Ok(Self { lambdas, rho })
    }

    pub fn n(&self) -> usize {
        self.lambdas.len()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambdas
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.lambdas[k]
    }

    /// `λ_k^{-2ρ}` for every retained mode.
    pub fn k_weights(&self) -> Vec<f64> {
        self.lambdas
            .iter()
            .map(|l| l.powf(-2.0 * self.rho))
            .collect()
    }

    /// `Σ_{k ≤ N} λ_k^{-2ρ}`.
    pub fn tail_weight(&self) -> f64 {
        self.k_weights().iter().sum()
    }

    /// Increments `λ_k^{-2ρ}` of the tail weight, one per mode. Their decay
    /// is the user's handle on truncation adequacy.
    pub fn tail_increments(&self) -> Vec<f64> {
        self.k_weights()
    }

    /// Diagonal of `e^{tA}`.
    pub fn semigroup_diag(&self, t: f64) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.lambdas.iter().map(|l| (-l * t).exp()))
    }

    /// Diagonal of `J_n`.
    pub fn jn_diag(&self, n: f64) -> DVector<f64> {
        DVector::from_iterator(self.n(), self.lambdas.iter().map(|l| n / (n + l)))
    }
}

/// Dirichlet Laplacian on `[0, π]`: `λ_k = k²`.
pub fn laplacian_basis(n: usize, rho: f64) -> Result<SpectralBasis> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "truncation level N must be at least 1".into(),
        ));
    }
    SpectralBasis::new((1..=n).map(|k| (k * k) as f64).collect(), rho)
}

/// Which operator norm to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Norm {
    /// Operator norm on `H` (largest singular value).
    OpH,
    /// Norm of `L_2(V;H) ∩ L_2(H;V')`.
    K,
    /// Norm of the symmetric subspace `K_s`.
    Ks,
    /// Hilbert–Schmidt norm on `H`.
    HS,
}

/// An operator in eigenbasis coordinates.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    basis: Arc<SpectralBasis>,
    entries: DMatrix<f64>,
    symmetric: bool,
    psd: Option<bool>,
}

impl OperatorMatrix {
    /// General (not necessarily symmetric) operator.
    pub fn new(basis: Arc<SpectralBasis>, entries: DMatrix<f64>) -> Result<Self> {
        let n = basis.n();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::ContractViolation(format!(
                "operator matrix is {}x{}, basis has N = {n}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        Ok(Self {
            basis,
            entries,
            symmetric: false,
            psd: None,
        })
    }

    /// Symmetric operator obtained by replacing `G` with `(G + Gᵀ)/2`.
    /// Returns the operator together with the asymmetry `max |G_jk - G_kj|`
    /// measured before symmetrization.
    pub fn symmetrized(basis: Arc<SpectralBasis>, mut entries: DMatrix<f64>) -> Result<(Self, f64)> {
        let n = basis.n();
        if entries.nrows() != n || entries.ncols() != n {
            return Err(Error::ContractViolation(format!(
                "operator matrix is {}x{}, basis has N = {n}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        let asym = symmetrize(&mut entries);
        Ok((
            Self {
                basis,
                entries,
                symmetric: true,
                psd: None,
            },
            asym,
        ))
    }

    pub fn symmetric(basis: Arc<SpectralBasis>, entries: DMatrix<f64>) -> Result<Self> {
        Self::symmetrized(basis, entries).map(|(op, _)| op)
    }

    pub fn zeros(basis: Arc<SpectralBasis>) -> Self {
        let n = basis.n();
        Self {
            basis,
            entries: DMatrix::zeros(n, n),
            symmetric: true,
            psd: Some(true),
        }
    }

    pub fn identity(basis: Arc<SpectralBasis>) -> Self {
        let n = basis.n();
        Self {
            basis,
            entries: DMatrix::identity(n, n),
            symmetric: true,
            psd: Some(true),
        }
    }

    pub fn diagonal(basis: Arc<SpectralBasis>, diag: &[f64]) -> Result<Self> {
        if diag.len() != basis.n() {
            return Err(Error::ContractViolation(format!(
                "diagonal has {} entries, basis has N = {}",
                diag.len(),
                basis.n()
            )));
        }
        let entries = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
        let psd = diag.iter().all(|d| *d >= 0.0);
        Ok(Self {
            basis,
            entries,
            symmetric: true,
            psd: Some(psd),
        })
    }

    /// Rank-one `e_row ⊗ e_col`, i.e. the single entry `G_{row,col} = 1`.
    pub fn unit(basis: Arc<SpectralBasis>, row: usize, col: usize) -> Result<Self> {
        let n = basis.n();
        if row >= n || col >= n {
            return Err(Error::ContractViolation(format!(
                "unit entry ({row},{col}) outside N = {n}"
            )));
        }
        let mut entries = DMatrix::zeros(n, n);
        entries[(row, col)] = 1.0;
        Ok(Self {
            symmetric: row == col,
            psd: if row == col { Some(true) } else { None },
            basis,
            entries,
        })
    }

    pub fn basis(&self) -> &Arc<SpectralBasis> {
        &self.basis
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn psd(&self) -> Option<bool> {
        self.psd
    }

    /// Evaluates and records the PSD flag against `tol`.
    pub fn check_psd(&mut self, tol: f64) -> bool {
        let ok = min_eigenvalue(&self.entries) >= -tol;
        self.psd = Some(ok);
        ok
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.entries)
    }

    fn with_entries(&self, entries: DMatrix<f64>) -> Self {
        Self {
            basis: self.basis.clone(),
            entries,
            symmetric: self.symmetric,
            psd: self.psd,
        }
    }
}

/// Replaces `g` with `(g + gᵀ)/2` in place; returns the asymmetry removed.
pub fn symmetrize(g: &mut DMatrix<f64>) -> f64 {
    let n = g.nrows();
    let mut asym = 0.0_f64;
    for j in 0..n {
        for k in (j + 1)..n {
            let a = g[(j, k)];
            let b = g[(k, j)];
            asym = asym.max((a - b).abs());
            let m = 0.5 * (a + b);
            g[(j, k)] = m;
            g[(k, j)] = m;
        }
    }
    asym
}

/// Largest singular value.
pub fn op_norm(g: &DMatrix<f64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    if g.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    if is_diagonal(g) {
        return g.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    }
    g.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |m, v| m.max(*v))
}

fn is_diagonal(g: &DMatrix<f64>) -> bool {
    let n = g.nrows();
    for j in 0..n {
        for k in 0..g.ncols() {
            if j != k && g[(j, k)] != 0.0 {
                return false;
            }
        }
    }
    true
}

/// Smallest eigenvalue of the symmetric part.
pub fn min_eigenvalue(g: &DMatrix<f64>) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    if is_diagonal(g) {
        return g.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(*v));
    }
    let mut s = g.clone();
    symmetrize(&mut s);
    SymmetricEigen::new(s)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(*v))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sorted_eigenvalues(g: &DMatrix<f64>) -> Vec<f64> {
    let mut s = g.clone();
    symmetrize(&mut s);
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Symmetric square root with eigenvalues clipped at zero. Eigenvalues below
/// `-tol` are rejected.
pub fn sqrt_psd(g: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    if is_diagonal(g) {
        let mut out = DMatrix::zeros(g.nrows(), g.ncols());
        for k in 0..g.nrows() {
            let v = g[(k, k)];
            if v < -tol {
                return Err(Error::SolverFailure(format!(
                    "square root of a matrix with eigenvalue {v:.3e} < -{tol:.1e}"
                )));
            }
            out[(k, k)] = v.max(0.0).sqrt();
        }
        return Ok(out);
    }
    let mut s = g.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    if let Some(v) = eig.eigenvalues.iter().find(|v| **v < -tol) {
        return Err(Error::SolverFailure(format!(
            "square root of a matrix with eigenvalue {v:.3e} < -{tol:.1e}"
        )));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&d) * q.transpose();
    symmetrize(&mut out);
    Ok(out)
}

/// Clips eigenvalues in `[-tol, 0)` to zero; anything more negative is a
/// solver failure.
pub fn repair_psd(g: &mut DMatrix<f64>, tol: f64) -> Result<()> {
    let min = min_eigenvalue(g);
    if min >= 0.0 {
        return Ok(());
    }
    if min < -tol {
        return Err(Error::SolverFailure(format!(
            "operator has eigenvalue {min:.3e} below -{tol:.1e}"
        )));
    }
    if is_diagonal(g) {
        for k in 0..g.nrows() {
            if g[(k, k)] < 0.0 {
                g[(k, k)] = 0.0;
            }
        }
        return Ok(());
    }
    let mut s = g.clone();
    symmetrize(&mut s);
    let eig = SymmetricEigen::new(s);
    let d = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    *g = q * DMatrix::from_diagonal(&d) * q.transpose();
    symmetrize(g);
    Ok(())
}

/// Raw-matrix norm evaluation; `Ks` assumes the caller checked symmetry.
pub fn matrix_norm(basis: &SpectralBasis, g: &DMatrix<f64>, which: Norm) -> f64 {
    match which {
        Norm::OpH => op_norm(g),
        Norm::HS => g.norm(),
        Norm::K => {
            let w = basis.k_weights();
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                let col = g.column(k).norm_squared();
                let row = g.row(k).norm_squared();
                acc += wk * (col + row);
            }
            acc.sqrt()
        }
        Norm::Ks => {
            let w = basis.k_weights();
            let mut acc = 0.0;
            for (k, wk) in w.iter().enumerate() {
                acc += wk * g.column(k).norm_squared();
            }
            (2.0 * acc).sqrt()
        }
    }
}

pub fn norm(g: &OperatorMatrix, which: Norm) -> Result<f64> {
    if which == Norm::Ks && !g.symmetric {
        return Err(Error::ContractViolation(
            "K_s norm requested on an operator without the symmetric flag".into(),
        ));
    }
    Ok(matrix_norm(&g.basis, &g.entries, which))
}

/// Scales `g` by `d_j d_k` entrywise, i.e. `D g D` for diagonal `D`.
pub(crate) fn diag_congruence(g: &DMatrix<f64>, d: &DVector<f64>) -> DMatrix<f64> {
    let n = g.nrows();
    DMatrix::from_fn(n, n, |j, k| d[j] * g[(j, k)] * d[k])
}

/// `e^{tA'} G e^{tA}`: entries scaled by `e^{-(λ_j+λ_k)t}`.
pub fn semigroup_conjugate(g: &OperatorMatrix, t: f64) -> Result<OperatorMatrix> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(Error::Domain(format!(
            "semigroup evaluated at t = {t}; only t >= 0 is defined"
        )));
    }
    if t == 0.0 {
        return Ok(g.clone());
    }
    let lam = g.basis.lambdas();
    let n = lam.len();
    let e = &g.entries;
    let out = DMatrix::from_fn(n, n, |j, k| (-(lam[j] + lam[k]) * t).exp() * e[(j, k)]);
    Ok(g.with_entries(out))
}

/// `J_n G J_n` with `J_n e_k = n/(n+λ_k) e_k`.
pub fn jn_conjugate(g: &OperatorMatrix, n: f64) -> Result<OperatorMatrix> {
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::Domain(format!(
            "regularization index n = {n} must be positive"
        )));
    }
    let d = g.basis.jn_diag(n);
    Ok(g.with_entries(diag_congruence(&g.entries, &d)))
}

#[derive(Debug, Clone, Serialize)]
pub struct SmoothingReport {
    pub rho: f64,
    pub observed_max: f64,
    pub argmax_t: f64,
    pub argmax_mode: usize,
    pub analytic_sup: f64,
    pub bound: f64,
    pub within_bound: bool,
}

/// Audits `t^ρ |e^{tA}|_{L(H,V)} ≤ 1` on the truncation:
/// `max_{t,k} t^ρ λ_k^ρ e^{-λ_k t}` against the analytic supremum `(ρ/e)^ρ`.
pub fn smoothing_audit(basis: &SpectralBasis, t_grid: &[f64]) -> Result<SmoothingReport> {
    if t_grid.is_empty() {
        return Err(Error::InvalidConfig("smoothing audit needs a nonempty time grid".into()));
    }
    if let Some(t) = t_grid.iter().find(|t| !(**t > 0.0)) {
        return Err(Error::Domain(format!("smoothing audit time {t} must be positive")));
    }
    let rho = basis.rho();
    let mut best = (f64::NEG_INFINITY, 0.0, 0usize);
    for &t in t_grid {
        for (k, l) in basis.lambdas().iter().enumerate() {
            let x = l * t;
            let v = x.powf(rho) * (-x).exp();
            if v > best.0 {
                best = (v, t, k);
            }
        }
    }
    let analytic_sup = (rho / std::f64::consts::E).powf(rho);
    Ok(SmoothingReport {
        rho,
        observed_max: best.0,
        argmax_t: best.1,
        argmax_mode: best.2 + 1,
        analytic_sup,
        bound: 1.0,
        within_bound: best.0 <= 1.0,
    })
}

/// Log-spaced grid on `[t_min, t_max]`.
pub fn log_grid(t_min: f64, t_max: f64, points: usize) -> Vec<f64> {
    let (a, b) = (t_min.ln(), t_max.ln());
    (0..points)
        .map(|i| (a + (b - a) * i as f64 / (points.max(2) - 1) as f64).exp())
        .collect()
}

/// One checked property of the resolvent regularizers.
#[derive(Debug, Clone, Serialize)]
pub struct JnCheck {
    pub property: &'static str,
    pub value: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct JnReport {
    pub n: f64,
    pub checks: Vec<JnCheck>,
    pub all_hold: bool,
}

/// Verifies the five listed properties of `J_n` at truncation for each `n`.
/// The limit property is checked as `|J_n x - x| ≤ |x| max_k λ_k/(n+λ_k)`
/// plus monotone decay across the supplied `ns` (which must be increasing).
pub fn jn_property_audit(basis: &SpectralBasis, ns: &[f64]) -> Result<Vec<JnReport>> {
    let rho = basis.rho();
    let lam = basis.lambdas();
    let x = DVector::from_element(basis.n(), 1.0);
    let mut prev_gap = f64::INFINITY;
    let mut out = Vec::with_capacity(ns.len());
    let eps = 1e-14;
    for &n in ns {
        if !(n > 0.0) {
            return Err(Error::Domain(format!("n = {n} must be positive")));
        }
        let d = basis.jn_diag(n);
        let mut checks = Vec::new();
        // 1: eigen-action
        let mut err1 = 0.0_f64;
        for k in 0..basis.n() {
            let mut ek = DVector::zeros(basis.n());
            ek[k] = 1.0;
            let img = DMatrix::from_diagonal(&d) * &ek;
            err1 = err1.max((img - &ek * (n / (n + lam[k]))).amax());
        }
        checks.push(JnCheck { property: "eigen_action", value: err1, bound: 0.0, holds: err1 == 0.0 });
        // 2: contractivity on H, V and V' (all diagonal, so the same number)
        let sup = d.iter().fold(0.0_f64, |m, v| m.max(*v));
        checks.push(JnCheck { property: "contraction_H_V_Vprime", value: sup, bound: 1.0, holds: sup <= 1.0 });
        // 3: |J_n|_{L(H,V)} and |J_n|_{L(V',H)} ≤ n^ρ
        let hv = lam
            .iter()
            .zip(d.iter())
            .fold(0.0_f64, |m, (l, dk)| m.max(l.powf(rho) * dk));
        let nr = n.powf(rho);
        checks.push(JnCheck { property: "smoothing_H_to_V", value: hv, bound: nr, holds: hv <= nr * (1.0 + eps) });
        // 4: strong convergence to the identity
        let gap = (DMatrix::from_diagonal(&d) * &x - &x).norm();
        let gap_bound = x.norm() * lam.iter().fold(0.0_f64, |m, l| m.max(l / (n + l)));
        let monotone = gap <= prev_gap;
        prev_gap = gap;
        checks.push(JnCheck {
            property: "strong_limit_identity",
            value: gap,
            bound: gap_bound,
            holds: gap <= gap_bound * (1.0 + eps) && monotone,
        });
        // 5: Hilbert–Schmidt bound through the inclusion V ↪ H
        let hs = d.norm();
        let incl = basis.tail_weight().sqrt();
        checks.push(JnCheck {
            property: "hilbert_schmidt",
            value: hs,
            bound: incl * hv,
            holds: hs <= incl * hv * (1.0 + eps),
        });
        let all_hold = checks.iter().all(|c| c.holds);
        out.push(JnReport { n, checks, all_hold });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lap(n: usize) -> Arc<SpectralBasis> {
        Arc::new(laplacian_basis(n, 0.4).unwrap())
    }

    #[test]
    fn laplacian_eigenvalues() {
        assert_eq!(laplacian_basis(3, 0.4).unwrap().lambdas(), &[1.0, 4.0, 9.0]);
        assert_eq!(laplacian_basis(1, 0.3).unwrap().lambdas(), &[1.0]);
        assert!(matches!(laplacian_basis(5, 0.25), Err(Error::InvalidConfig(_))));
        assert!(matches!(laplacian_basis(5, 0.5), Err(Error::InvalidConfig(_))));
        assert!(matches!(laplacian_basis(0, 0.4), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn tail_increments_decrease() {
        let b = laplacian_basis(20, 0.4).unwrap();
        let inc = b.tail_increments();
        assert!(inc.windows(2).all(|w| w[1] < w[0]));
        assert!((b.tail_weight() - inc.iter().sum::<f64>()).abs() < 1e-15);
    }

    #[test]
    fn semigroup_examples() {
        let b = lap(3);
        let id = OperatorMatrix::identity(b.clone());
        let out = semigroup_conjugate(&id, 0.7).unwrap();
        for k in 0..3 {
            let expect = (-2.0 * b.lambda(k) * 0.7).exp();
            assert_eq!(out.entries()[(k, k)], expect);
        }
        let g = OperatorMatrix::symmetric(b.clone(), DMatrix::from_fn(3, 3, |j, k| (j + k) as f64)).unwrap();
        assert_eq!(semigroup_conjugate(&g, 0.0).unwrap().entries(), g.entries());
        assert!(matches!(semigroup_conjugate(&g, -1.0), Err(Error::Domain(_))));

        let b2 = lap(2);
        let u = OperatorMatrix::unit(b2, 1, 0).unwrap();
        let s = semigroup_conjugate(&u, 0.5).unwrap();
        assert!((s.entries()[(1, 0)] - (-2.5_f64).exp()).abs() < 1e-16);
        assert_eq!(s.entries()[(0, 1)], 0.0);
    }

    #[test]
    fn norm_examples() {
        let b = lap(3);
        let z = OperatorMatrix::zeros(b.clone());
        for w in [Norm::OpH, Norm::K, Norm::Ks, Norm::HS] {
            assert_eq!(norm(&z, w).unwrap(), 0.0);
        }
        let e11 = OperatorMatrix::unit(b.clone(), 0, 0).unwrap();
        assert!((norm(&e11, Norm::K).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        let id = OperatorMatrix::identity(b.clone());
        let expect = (2.0 * (1.0 + 4f64.powf(-0.8) + 9f64.powf(-0.8))).sqrt();
        assert!((norm(&id, Norm::K).unwrap() - expect).abs() < 1e-14);
        assert!((expect - 1.7334).abs() < 5e-5);
        let ns = OperatorMatrix::unit(b, 1, 0).unwrap();
        assert!(matches!(norm(&ns, Norm::Ks), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn jn_examples() {
        let b = lap(3);
        let e11 = OperatorMatrix::unit(b.clone(), 0, 0).unwrap();
        let r = jn_conjugate(&e11, 1.0).unwrap();
        assert_eq!(r.entries()[(0, 0)], 0.25);
        assert!(matches!(jn_conjugate(&e11, 0.0), Err(Error::Domain(_))));
        let g = OperatorMatrix::symmetric(b.clone(), DMatrix::from_fn(3, 3, |j, k| 1.0 / (1 + j + k) as f64)).unwrap();
        let far = jn_conjugate(&g, 1e9).unwrap();
        assert!((far.entries() - g.entries()).amax() < 1e-7);
    }

    #[test]
    fn smoothing_audit_matches_analytic_sup() {
        let b = laplacian_basis(8, 0.4).unwrap();
        let rep = smoothing_audit(&b, &log_grid(1e-4, 10.0, 4000)).unwrap();
        assert!(rep.within_bound);
        assert!((rep.analytic_sup - 0.4646).abs() < 1e-4);
        assert!((rep.observed_max - rep.analytic_sup).abs() < 1e-3);
        assert!(matches!(smoothing_audit(&b, &[]), Err(Error::InvalidConfig(_))));
        // small-time limit
        let tiny = smoothing_audit(&b, &[1e-12]).unwrap();
        assert!(tiny.observed_max < 1e-3);
    }

    #[test]
    fn jn_properties_hold() {
        let b = laplacian_basis(10, 0.4).unwrap();
        for rep in jn_property_audit(&b, &[1.0, 10.0, 100.0]).unwrap() {
            assert!(rep.all_hold, "{rep:?}");
        }
    }

    #[test]
    fn sqrt_and_repair() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let r = sqrt_psd(&m, 1e-10).unwrap();
        assert!((&r * &r - &m).amax() < 1e-12);
        let mut bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        assert!(repair_psd(&mut bad, 1e-10).is_err());
        let mut ok = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        repair_psd(&mut ok, 1e-10).unwrap();
        assert_eq!(ok[(1, 1)], 0.0);
    }

    fn arb_matrix(n: usize) -> impl Strategy<Value = DMatrix<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n * n).prop_map(move |v| DMatrix::from_vec(n, n, v))
    }

    proptest! {
        #[test]
        fn k_norm_bounded_by_op_norm(g in arb_matrix(5)) {
            let b = lap(5);
            let k = matrix_norm(&b, &g, Norm::K);
            let op = matrix_norm(&b, &g, Norm::OpH);
            prop_assert!(k <= (2.0 * b.tail_weight()).sqrt() * op * (1.0 + 1e-12));
        }

        #[test]
        fn semigroup_composes(g in arb_matrix(4), s in 0.0f64..1.0, t in 0.0f64..1.0) {
            let b = lap(4);
            let op = OperatorMatrix::new(b, g).unwrap();
            let two = semigroup_conjugate(&semigroup_conjugate(&op, s).unwrap(), t).unwrap();
            let one = semigroup_conjugate(&op, s + t).unwrap();
            let scale = op.entries().amax().max(1e-300);
            prop_assert!((two.entries() - one.entries()).amax() <= 1e-13 * scale);
        }

        #[test]
        fn jn_preserves_flags(g in arb_matrix(4), n in 0.1f64..1e4) {
            let b = lap(4);
            let psd = &g * g.transpose();
            let mut op = OperatorMatrix::symmetric(b, psd).unwrap();
            op.check_psd(1e-10);
            let out = jn_conjugate(&op, n).unwrap();
            prop_assert!(out.is_symmetric());
            prop_assert_eq!(out.psd(), Some(true));
            prop_assert!(out.min_eigenvalue() >= -1e-10);
            prop_assert!(op_norm(out.entries()) <= op_norm(op.entries()) * (1.0 + 1e-12));
        }

        #[test]
        fn ks_matches_k_on_symmetric(g in arb_matrix(5)) {
            let b = lap(5);
            let op = OperatorMatrix::symmetric(b, g).unwrap();
            let k = norm(&op, Norm::K).unwrap();
            let ks = norm(&op, Norm::Ks).unwrap();
            prop_assert!((k * k - ks * ks).abs() <= 1e-12 * (k * k).max(1e-300));
        }

        #[test]
        fn norms_are_seminorms(g in arb_matrix(4), h in arb_matrix(4), a in -5.0f64..5.0) {
            let b = lap(4);
            for w in [Norm::OpH, Norm::K, Norm::HS] {
                let ng = matrix_norm(&b, &g, w);
                let nh = matrix_norm(&b, &h, w);
                let sum = matrix_norm(&b, &(&g + &h), w);
                prop_assert!(sum <= (ng + nh) * (1.0 + 1e-12) + 1e-14);
                let scaled = matrix_norm(&b, &(&g * a), w);
                prop_assert!((scaled - a.abs() * ng).abs() <= 1e-12 * ng.max(1.0));
            }
        }
    }
}
