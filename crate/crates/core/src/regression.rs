//! Least-squares conditional expectations given the current driver value.
//!
//! At time `t > 0` the regressor is `z = W_t / sqrt(t)`, a standard normal
//! variable, and the features are the normalized probabilists' Hermite
//! polynomials `He_d(z) / sqrt(d!)`. They are orthonormal under the law of
//! `z`, so the constant coefficient of a fitted surface is its mean.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::spectral::symmetrize;

pub const DEFAULT_DEGREE: usize = 4;
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionConfig {
    pub degree: usize,
    pub ridge: f64,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            degree: DEFAULT_DEGREE,
            ridge: DEFAULT_RIDGE,
        }
    }
}

/// Normalized Hermite features `φ_0(z), …, φ_degree(z)` written into `out`.
pub fn hermite_features(z: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = 1.0;
    if out.len() > 1 {
        out[1] = z;
    }
    for n in 1..out.len().saturating_sub(1) {
        let nf = n as f64;
        out[n + 1] = (z * out[n] - nf.sqrt() * out[n - 1]) / (nf + 1.0).sqrt();
    }
}

/// Derivatives `φ_d'(z) = sqrt(d) φ_{d-1}(z)`.
fn hermite_feature_derivatives(z: f64, out: &mut [f64]) {
    let mut f = vec![0.0; out.len()];
    hermite_features(z, &mut f);
    for d in (0..out.len()).rev() {
        out[d] = if d == 0 { 0.0 } else { (d as f64).sqrt() * f[d - 1] };
    }
}

/// A matrix-valued function of the driver value, `w ↦ Σ_d A_d φ_d(w / scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    scale: f64,
    coeffs: Vec<DMatrix<f64>>,
}

impl Surface {
    /// A surface that does not depend on the driver.
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            scale: 0.0,
            coeffs: vec![m],
        }
    }

    pub fn from_coefficients(scale: f64, coeffs: Vec<DMatrix<f64>>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::ContractViolation("surface needs at least one coefficient".into()));
        }
        if coeffs.len() > 1 && !(scale > 0.0) {
            return Err(Error::ContractViolation("non-constant surface needs a positive scale".into()));
        }
        Ok(Self { scale, coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn coefficients(&self) -> &[DMatrix<f64>] {
        &self.coeffs
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.len() == 1
    }

    /// Mean under the law of the driver at the surface's time.
    pub fn mean(&self) -> &DMatrix<f64> {
        &self.coeffs[0]
    }

    pub fn dim(&self) -> usize {
        self.coeffs[0].nrows()
    }

    pub fn eval(&self, w: f64) -> DMatrix<f64> {
        if self.is_constant() {
            return self.coeffs[0].clone();
        }
        let mut f = vec![0.0; self.coeffs.len()];
        hermite_features(w / self.scale, &mut f);
        let mut out = self.coeffs[0].clone();
        for (a, fd) in self.coeffs.iter().zip(&f).skip(1) {
            out += a * *fd;
        }
        out
    }

    /// `∂_w` of the surface.
    pub fn derivative(&self, w: f64) -> DMatrix<f64> {
        let n = self.dim();
        if self.is_constant() {
            return DMatrix::zeros(n, n);
        }
        let mut f = vec![0.0; self.coeffs.len()];
        hermite_feature_derivatives(w / self.scale, &mut f);
        let mut out = DMatrix::zeros(n, n);
        for (a, fd) in self.coeffs.iter().zip(&f).skip(1) {
            out += a * (*fd / self.scale);
        }
        out
    }

    pub fn symmetrize(&mut self) -> f64 {
        self.coeffs.iter_mut().map(symmetrize).fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(&DMatrix<f64>) -> DMatrix<f64>) -> Self {
        Self {
            scale: self.scale,
            coeffs: self.coeffs.iter().map(f).collect(),
        }
    }
}

/// Fits `E[target | W_t = w]` from samples `(ws[j], targets[j])`.
///
/// `scale` is `sqrt(t)`; at `t = 0` pass `0.0` and the fit reduces to the
/// sample mean. Sums run over samples in index order.
pub fn regress(ws: &[f64], targets: &[DMatrix<f64>], scale: f64, cfg: &RegressionConfig) -> Result<Surface> {
    let n_samples = ws.len();
    if n_samples == 0 || targets.len() != n_samples {
        return Err(Error::ContractViolation(format!(
            "{} regressors for {} targets",
            n_samples,
            targets.len()
        )));
    }
    let (rows, cols) = targets[0].shape();
    let degree = if scale > 0.0 { cfg.degree } else { 0 };
    let p = degree + 1;
    if n_samples < p {
        return Err(Error::InvalidConfig(format!(
            "regression underdetermined: {n_samples} paths for {p} features"
        )));
    }
    if degree == 0 {
        let mean = crate::stats::pairwise_sum_matrices(targets) / n_samples as f64;
        return Surface::from_coefficients(0.0, vec![mean]);
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, rows * cols);
    let mut f = vec![0.0; p];
    for (w, y) in ws.iter().zip(targets) {
        hermite_features(w / scale, &mut f);
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] += f[a] * f[b];
            }
            for (e, v) in y.iter().enumerate() {
                rhs[(a, e)] += f[a] * v;
            }
        }
    }
    let inv_n = 1.0 / n_samples as f64;
    for a in 0..p {
        for b in a..p {
            let v = gram[(a, b)] * inv_n;
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
        gram[(a, a)] += cfg.ridge;
    }
    rhs *= inv_n;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidConfig("degenerate regression design".into()))?;
    let beta = chol.solve(&rhs);
    let coeffs = (0..p)
        .map(|a| {
            let row: DVector<f64> = beta.row(a).transpose();
            DMatrix::from_column_slice(rows, cols, row.as_slice())
        })
        .collect();
    Surface::from_coefficients(scale, coeffs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::gauss_hermite_normal;

    #[test]
    fn features_are_orthonormal() {
        let (z, w) = gauss_hermite_normal(12);
        let mut f = vec![0.0; 6];
        let mut g = DMatrix::<f64>::zeros(6, 6);
        for (zq, wq) in z.iter().zip(&w) {
            hermite_features(*zq, &mut f);
            for a in 0..6 {
                for b in 0..6 {
                    g[(a, b)] += wq * f[a] * f[b];
                }
            }
        }
        assert!((g - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
    }

    #[test]
    fn recovers_polynomial_exactly() {
        let ws: Vec<f64> = (0..200).map(|j| -3.0 + 6.0 * j as f64 / 199.0).collect();
        let targets: Vec<DMatrix<f64>> = ws
            .iter()
            .map(|w| DMatrix::from_element(1, 1, 1.0 + 2.0 * w - 0.5 * w * w * w))
            .collect();
        let cfg = RegressionConfig { degree: 4, ridge: 0.0 };
        let s = regress(&ws, &targets, 1.5, &cfg).unwrap();
        for w in [-2.0, 0.1, 1.7] {
            let exact = 1.0 + 2.0 * w - 0.5 * w * w * w;
            assert!((s.eval(w)[(0, 0)] - exact).abs() < 1e-9);
            let d = 2.0 - 1.5 * w * w;
            assert!((s.derivative(w)[(0, 0)] - d).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_scale_gives_mean() {
        let ws = vec![0.0; 4];
        let targets: Vec<DMatrix<f64>> = (0..4).map(|j| DMatrix::from_element(2, 2, j as f64)).collect();
        let s = regress(&ws, &targets, 0.0, &RegressionConfig::default()).unwrap();
        assert!(s.is_constant());
        assert_eq!(s.mean()[(1, 0)], 1.5);
    }

    #[test]
    fn underdetermined_is_rejected() {
        let ws = vec![0.1, 0.2];
        let targets = vec![DMatrix::zeros(1, 1); 2];
        assert!(matches!(
            regress(&ws, &targets, 1.0, &RegressionConfig::default()),
            Err(Error::InvalidConfig(_))
        ));
    }
}
