//! Mild-solution simulation of the controlled state equation
//! `dy = (Ay + Bu) dt + Cy dW` and its stochastic flow.
//!
//! One step of the scheme is `y_{i+1} = e^{hA}(y_i + h B_i u_i + C_i y_i ΔW_i)`.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{sample_paths, BrownianPath, Coefficients, CoefficientModel, PathPrefix};
use crate::error::{Error, Result};
use crate::spectral::{OperatorMatrix, SpectralBasis};
use crate::stats::{pairwise_sum, Estimate};

/// A control rule evaluated along a path. Rules see the current state, the
/// coefficients at the current time and the path prefix, nothing later.
pub trait ControlPolicy: Sync {
    fn control(&self, y: &DVector<f64>, coeffs: &Coefficients, prefix: PathPrefix<'_>) -> Result<DVector<f64>>;

    fn name(&self) -> String;

    /// True when the rule always returns zero.
    fn is_zero(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroControl;

impl ControlPolicy for ZeroControl {
    fn control(&self, y: &DVector<f64>, _: &Coefficients, _: PathPrefix<'_>) -> Result<DVector<f64>> {
        Ok(DVector::zeros(y.len()))
    }

    fn name(&self) -> String {
        "zero".into()
    }

    fn is_zero(&self) -> bool {
        true
    }
}

/// A deterministic control schedule, one value per grid time.
#[derive(Debug, Clone)]
pub struct OpenLoopControl {
    pub label: String,
    pub values: Vec<DVector<f64>>,
}

impl ControlPolicy for OpenLoopControl {
    fn control(&self, y: &DVector<f64>, _: &Coefficients, prefix: PathPrefix<'_>) -> Result<DVector<f64>> {
        let u = self.values.get(prefix.step()).ok_or_else(|| {
            Error::ContractViolation(format!("open-loop control has no value at step {}", prefix.step()))
        })?;
        if u.len() != y.len() {
            return Err(Error::ContractViolation(format!(
                "control of dimension {} for state of dimension {}",
                u.len(),
                y.len()
            )));
        }
        Ok(u.clone())
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// States and controls along one path.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// `u_i` applied on `[t_i, t_{i+1})`; the last entry is the rule evaluated at `T`.
    pub controls: Vec<DVector<f64>>,
    pub path_index: u64,
}

impl Trajectory {
    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one state")
    }

    /// CSV with columns `t, y_1..y_N, u_1..u_N`.
    pub fn to_csv(&self) -> String {
        let n = self.states[0].len();
        let mut out = String::from("t");
        for k in 1..=n {
            let _ = write!(out, ",y_{k}");
        }
        for k in 1..=n {
            let _ = write!(out, ",u_{k}");
        }
        out.push('\n');
        for (i, t) in self.times.iter().enumerate() {
            let _ = write!(out, "{t:.16e}");
            for v in self.states[i].iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            for v in self.controls[i].iter() {
                let _ = write!(out, ",{v:.16e}");
            }
            out.push('\n');
        }
        out
    }
}

/// `Φ(t_from → t_to)`, the linear map `y(t_from) ↦ y(t_to)` for `u = 0`.
#[derive(Debug, Clone)]
pub struct FlowMatrix {
    pub from: usize,
    pub to: usize,
    pub entries: OperatorMatrix,
}

fn check_path(model: &CoefficientModel, path: &BrownianPath) -> Result<()> {
    if path.grid() != model.grid() {
        return Err(Error::ContractViolation(format!(
            "path grid ({} steps on [0, {}]) differs from model grid ({} steps on [0, {}])",
            path.grid().steps(),
            path.grid().t_final(),
            model.grid().steps(),
            model.grid().t_final()
        )));
    }
    Ok(())
}

/// Simulates the state equation from `x` at time 0 along `path`.
pub fn propagate(
    x: &DVector<f64>,
    policy: &dyn ControlPolicy,
    model: &CoefficientModel,
    path: &BrownianPath,
) -> Result<Trajectory> {
    let basis = model.basis();
    let n = basis.n();
    if x.len() != n {
        return Err(Error::ContractViolation(format!(
            "initial state has dimension {}, basis has N = {n}",
            x.len()
        )));
    }
    check_path(model, path)?;
    let grid = model.grid();
    let h = grid.h();
    let decay = basis.semigroup_diag(h);
    let steps = grid.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut controls = Vec::with_capacity(steps + 1);
    states.push(x.clone());
    for i in 0..=steps {
        let prefix = path.prefix(i);
        let coeffs = model.at(i, prefix.current())?;
        let y = &states[i];
        let u = policy.control(y, &coeffs, prefix)?;
        if u.len() != n {
            return Err(Error::ContractViolation(format!(
                "control has dimension {}, basis has N = {n}",
                u.len()
            )));
        }
        if i < steps {
            let mut z = y.clone();
            if !policy.is_zero() {
                z += &coeffs.b * &u * h;
            }
            z += &coeffs.c * y * path.dw(i);
            z.component_mul_assign(&decay);
            states.push(z);
        }
        controls.push(u);
    }
    Ok(Trajectory {
        times: grid.times(),
        states,
        controls,
        path_index: path.index(),
    })
}

/// One step of the uncontrolled scheme as a matrix, `e^{hA}(I + C_i ΔW_i)`.
pub fn step_matrix(model: &CoefficientModel, path: &BrownianPath, i: usize) -> Result<DMatrix<f64>> {
    let n = model.basis().n();
    let decay = model.basis().semigroup_diag(model.grid().h());
    let coeffs = model.at(i, path.w(i))?;
    let mut g = DMatrix::identity(n, n) + &coeffs.c * path.dw(i);
    for (j, mut row) in g.row_iter_mut().enumerate() {
        row *= decay[j];
    }
    Ok(g)
}

/// `Φ(t_from → t_to)` as the ordered product of step matrices.
pub fn flow(model: &CoefficientModel, path: &BrownianPath, from: usize, to: usize) -> Result<FlowMatrix> {
    check_path(model, path)?;
    if from > to || to > model.grid().steps() {
        return Err(Error::ContractViolation(format!("flow from step {from} to step {to}")));
    }
    let n = model.basis().n();
    let mut phi = DMatrix::identity(n, n);
    for i in from..to {
        phi = step_matrix(model, path, i)? * phi;
    }
    Ok(FlowMatrix {
        from,
        to,
        entries: OperatorMatrix::new(model.basis().clone(), phi)?,
    })
}

/// `Φ(t_i → T)` for every grid index `i`, built backward by
/// `Φ(t_i → T) = Φ(t_{i+1} → T) · e^{hA}(I + C_i ΔW_i)`.
pub fn flow_matrices(model: &CoefficientModel, path: &BrownianPath) -> Result<Vec<FlowMatrix>> {
    check_path(model, path)?;
    let steps = model.grid().steps();
    let n = model.basis().n();
    let mut out = Vec::with_capacity(steps + 1);
    let mut phi = DMatrix::identity(n, n);
    out.push(phi.clone());
    for i in (0..steps).rev() {
        phi = &phi * step_matrix(model, path, i)?;
        out.push(phi.clone());
    }
    out.reverse();
    out.into_iter()
        .enumerate()
        .map(|(i, m)| {
            Ok(FlowMatrix {
                from: i,
                to: steps,
                entries: OperatorMatrix::new(model.basis().clone(), m)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub n_paths: usize,
    /// Estimated `E|y(t_i)|²` per grid time.
    pub second_moments: Vec<f64>,
    pub sup_second_moment: f64,
    pub argmax_time: f64,
    /// `|x|² + E ∫ |u|² ds`.
    pub rhs_bracket: f64,
    /// Empirical `C₂`; `None` when both sides vanish.
    pub ratio: Option<f64>,
}

/// Compares `sup_s E|y(s)|²` with `|x|² + E∫|u|²` on an ensemble.
pub fn moment_audit(
    model: &CoefficientModel,
    x: &DVector<f64>,
    policy: &dyn ControlPolicy,
    n_paths: usize,
    seed: u64,
) -> Result<MomentReport> {
    let grid = *model.grid();
    let h = grid.h();
    let paths = sample_paths(&grid, n_paths, seed)?;
    let per_path: Vec<(Vec<f64>, f64)> = paths
        .par_iter()
        .map(|p| {
            let traj = propagate(x, policy, model, p)?;
            let sq: Vec<f64> = traj.states.iter().map(|y| y.norm_squared()).collect();
            let energy: Vec<f64> = traj.controls[..grid.steps()].iter().map(|u| h * u.norm_squared()).collect();
            Ok((sq, pairwise_sum(&energy)))
        })
        .collect::<Result<_>>()?;
    let second_moments: Vec<f64> = (0..=grid.steps())
        .map(|i| {
            let v: Vec<f64> = per_path.iter().map(|(sq, _)| sq[i]).collect();
            pairwise_sum(&v) / n_paths as f64
        })
        .collect();
    let energies: Vec<f64> = per_path.iter().map(|(_, e)| *e).collect();
    let rhs_bracket = x.norm_squared() + pairwise_sum(&energies) / n_paths as f64;
    let (argmax, sup) = second_moments
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
    let ratio = if rhs_bracket == 0.0 && sup == 0.0 {
        None
    } else {
        Some(sup / rhs_bracket)
    };
    Ok(MomentReport {
        n_paths,
        second_moments,
        sup_second_moment: sup,
        argmax_time: grid.time(argmax),
        rhs_bracket,
        ratio,
    })
}

fn diagonal_of(m: &DMatrix<f64>) -> Option<Vec<f64>> {
    let n = m.nrows();
    for j in 0..n {
        for k in 0..n {
            if j != k && m[(j, k)] != 0.0 {
                return None;
            }
        }
    }
    Some(m.diagonal().iter().copied().collect())
}

/// `sup_s λ_max(E[Φ(0→s)'Φ(0→s)])` for models with diagonal `C`.
///
/// Deterministic models are evaluated exactly from
/// `E[(e^{-λh}(1 + cΔW))²] = e^{-2λh}(1 + c²h)`; random models by an
/// ensemble of `n_paths` paths.
pub fn flow_second_moment_sup(model: &CoefficientModel, n_paths: usize, seed: u64) -> Result<f64> {
    let basis: &Arc<SpectralBasis> = model.basis();
    let grid = *model.grid();
    let h = grid.h();
    let n = basis.n();
    let decay2: Vec<f64> = basis.lambdas().iter().map(|l| (-2.0 * l * h).exp()).collect();
    let not_diag = || Error::ContractViolation("flow moment bound needs a diagonal C".into());
    if model.is_deterministic() {
        let mut acc = vec![1.0; n];
        let mut sup = 1.0_f64;
        for i in 0..grid.steps() {
            let c = diagonal_of(&model.at(i, 0.0)?.c).ok_or_else(not_diag)?;
            for k in 0..n {
                acc[k] *= decay2[k] * (1.0 + c[k] * c[k] * h);
                sup = sup.max(acc[k]);
            }
        }
        return Ok(sup);
    }
    let paths = sample_paths(&grid, n_paths, seed)?;
    let per_path: Vec<Vec<f64>> = paths
        .par_iter()
        .map(|p| {
            let mut acc = vec![1.0; n];
            let mut out = Vec::with_capacity(grid.steps() * n);
            for i in 0..grid.steps() {
                let c = diagonal_of(&model.at(i, p.w(i))?.c).ok_or_else(not_diag)?;
                for k in 0..n {
                    let g = 1.0 + c[k] * p.dw(i);
                    acc[k] *= decay2[k] * g * g;
                    out.push(acc[k]);
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut sup = 1.0_f64;
    for e in 0..grid.steps() * n {
        let v: Vec<f64> = per_path.iter().map(|r| r[e]).collect();
        sup = sup.max(pairwise_sum(&v) / n_paths as f64);
    }
    Ok(sup)
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakOrderReport {
    pub steps: Vec<usize>,
    pub errors: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub monotone: bool,
}

/// Weak error of the scheme for the scalar mode `dy = -λy dt + c y dW`,
/// measured on `E y(T)²` with the exact pathwise solution
/// `x e^{-λT} exp(cW_T - c²T/2)` evaluated on the same Brownian paths.
///
/// The scheme reproduces `E y(T)` exactly at every step size, so the first
/// moment carries no discretization signal.
pub fn weak_order_audit(
    lambda: f64,
    c: f64,
    x: f64,
    t_final: f64,
    base_steps: usize,
    halvings: usize,
    n_paths: usize,
    seed: u64,
) -> Result<WeakOrderReport> {
    let finest = base_steps << halvings;
    let fine = crate::coefficients::TimeGrid::new(t_final, finest)?;
    let paths = sample_paths(&fine, n_paths, seed)?;
    let exact: Vec<f64> = paths
        .iter()
        .map(|p| {
            let y = x * (-lambda * t_final).exp() * (c * p.w(finest) - 0.5 * c * c * t_final).exp();
            y * y
        })
        .collect();
    let mut steps = Vec::new();
    let mut errors = Vec::new();
    let mut std_errors = Vec::new();
    for level in 0..=halvings {
        let factor = 1 << (halvings - level);
        let l = finest / factor;
        let h = t_final / l as f64;
        let decay = (-lambda * h).exp();
        let diffs: Vec<f64> = paths
            .par_iter()
            .zip(exact.par_iter())
            .map(|(p, ex)| {
                let mut y = x;
                for i in 0..l {
                    let dw = p.w((i + 1) * factor) - p.w(i * factor);
                    y = decay * (y + c * y * dw);
                }
                y * y - ex
            })
            .collect();
        let est = Estimate::from_samples(&diffs);
        steps.push(l);
        errors.push(est.mean.abs());
        std_errors.push(est.std_error);
    }
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    Ok(WeakOrderReport {
        steps,
        errors,
        std_errors,
        monotone,
    })
}
