//! Feedback synthesis `u = -B'Py`, closed-loop simulation and Monte Carlo
//! checks of the value function.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::coefficients::{derive_seed, sample_paths, streams, BrownianPath, Coefficients, CoefficientModel, PathPrefix};
use crate::error::{Error, Result};
use crate::flow::{propagate, ControlPolicy, OpenLoopControl, Trajectory, ZeroControl};
use crate::lyapunov::BackwardSolution;
use crate::spectral::{sqrt_psd, DEFAULT_PSD_TOL};
use crate::stats::{pairwise_sum, Estimate};

/// `u = -B'Py`.
pub fn feedback(p: &DMatrix<f64>, b: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = y.len();
    if p.shape() != (n, n) || b.nrows() != n {
        return Err(Error::ContractViolation(format!(
            "feedback with P {:?}, B {:?} and state of dimension {n}",
            p.shape(),
            b.shape()
        )));
    }
    Ok(-(b.transpose() * (p * y)))
}

/// The optimal feedback rule of a Riccati solution.
pub struct FeedbackPolicy<'a> {
    pub solution: &'a BackwardSolution,
}

impl ControlPolicy for FeedbackPolicy<'_> {
    fn control(&self, y: &DVector<f64>, coeffs: &Coefficients, prefix: PathPrefix<'_>) -> Result<DVector<f64>> {
        let p = self.solution.p_at(prefix.step(), prefix.current());
        feedback(&p, &coeffs.b, y)
    }

    fn name(&self) -> String {
        "feedback".into()
    }
}

/// One simulated run with its realized cost.
#[derive(Debug, Clone)]
pub struct ControlRun {
    pub trajectory: Trajectory,
    pub cost: f64,
    pub path_seed: u64,
    pub path_index: u64,
}

/// `√S_i` per grid step, cached when `S` does not depend on the driver.
pub struct SqrtSource<'a> {
    model: &'a CoefficientModel,
    cache: Option<Vec<DMatrix<f64>>>,
}

impl<'a> SqrtSource<'a> {
    pub fn new(model: &'a CoefficientModel) -> Result<Self> {
        let cache = if model.is_deterministic() {
            Some(
                (0..=model.grid().steps())
                    .map(|i| sqrt_psd(&model.at(i, 0.0)?.s, DEFAULT_PSD_TOL))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        Ok(Self { model, cache })
    }

    pub fn at(&self, i: usize, w: f64) -> Result<DMatrix<f64>> {
        match &self.cache {
            Some(c) => Ok(c[i].clone()),
            None => sqrt_psd(&self.model.at(i, w)?.s, DEFAULT_PSD_TOL),
        }
    }
}

/// `Σ_{i<L} h(|√S_i y_i|² + |u_i|²) + ⟨M y_L, y_L⟩`.
pub fn realized_cost(
    trajectory: &Trajectory,
    model: &CoefficientModel,
    path: &BrownianPath,
    sqrt_s: &SqrtSource<'_>,
) -> Result<f64> {
    let grid = model.grid();
    let h = grid.h();
    let l = grid.steps();
    let mut terms = Vec::with_capacity(l + 1);
    for i in 0..l {
        let y = &trajectory.states[i];
        let sy = sqrt_s.at(i, path.w(i))? * y;
        terms.push(h * (sy.norm_squared() + trajectory.controls[i].norm_squared()));
    }
    let y_l = &trajectory.states[l];
    terms.push((model.final_datum() * y_l).dot(y_l));
    Ok(pairwise_sum(&terms))
}

fn run_policy(
    x: &DVector<f64>,
    policy: &dyn ControlPolicy,
    model: &CoefficientModel,
    path: &BrownianPath,
    sqrt_s: &SqrtSource<'_>,
) -> Result<ControlRun> {
    let trajectory = propagate(x, policy, model, path)?;
    let cost = realized_cost(&trajectory, model, path, sqrt_s)?;
    Ok(ControlRun {
        trajectory,
        cost,
        path_seed: path.seed(),
        path_index: path.index(),
    })
}

fn check_solution(solution: &BackwardSolution, model: &CoefficientModel) -> Result<()> {
    if &solution.grid != model.grid() {
        return Err(Error::ContractViolation("solution and model live on different grids".into()));
    }
    Ok(())
}

/// Simulates the closed loop `u = -B'P y` along `path`.
pub fn closed_loop(
    x: &DVector<f64>,
    solution: &BackwardSolution,
    model: &CoefficientModel,
    path: &BrownianPath,
) -> Result<ControlRun> {
    check_solution(solution, model)?;
    let sqrt_s = SqrtSource::new(model)?;
    run_policy(x, &FeedbackPolicy { solution }, model, path, &sqrt_s)
}

/// Simulates an arbitrary policy along `path`.
pub fn simulate_policy(
    x: &DVector<f64>,
    policy: &dyn ControlPolicy,
    model: &CoefficientModel,
    path: &BrownianPath,
) -> Result<ControlRun> {
    let sqrt_s = SqrtSource::new(model)?;
    run_policy(x, policy, model, path, &sqrt_s)
}

fn ensemble_costs(
    x: &DVector<f64>,
    policy: &dyn ControlPolicy,
    model: &CoefficientModel,
    paths: &[BrownianPath],
    sqrt_s: &SqrtSource<'_>,
) -> Result<Vec<f64>> {
    paths
        .par_iter()
        .map(|p| run_policy(x, policy, model, p, sqrt_s).map(|r| r.cost))
        .collect()
}

/// `⟨P(0)x, x⟩` with `P(0)` the (deterministic) value at time zero.
pub fn predicted_value(solution: &BackwardSolution, x: &DVector<f64>) -> f64 {
    (solution.p_mean(0) * x).dot(x)
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueReport {
    pub n_paths: usize,
    pub mean_cost: f64,
    pub std_error: f64,
    pub predicted: f64,
    pub z_score: f64,
}

/// Monte Carlo closed-loop cost against `⟨P(0)x, x⟩`.
pub fn value_check(
    x: &DVector<f64>,
    solution: &BackwardSolution,
    model: &CoefficientModel,
    n_paths: usize,
    seed: u64,
) -> Result<ValueReport> {
    check_solution(solution, model)?;
    let paths = sample_paths(model.grid(), n_paths, derive_seed(seed, streams::VERIFY))?;
    let sqrt_s = SqrtSource::new(model)?;
    let costs = ensemble_costs(x, &FeedbackPolicy { solution }, model, &paths, &sqrt_s)?;
    let est = Estimate::from_samples(&costs);
    let predicted = predicted_value(solution, x);
    Ok(ValueReport {
        n_paths,
        mean_cost: est.mean,
        std_error: est.std_error,
        predicted,
        z_score: est.z_score(predicted),
    })
}

/// Policies the feedback law is compared against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Challenger {
    Zero,
    /// `u_k(t) = amplitude Σ_{m=1}^{3} a_{km} sin(mπt/T)` with Gaussian `a`.
    RandomOpenLoop { seed: u64, amplitude: f64 },
    Feedback,
}

impl Challenger {
    pub fn label(&self) -> String {
        match self {
            Challenger::Zero => "zero".into(),
            Challenger::RandomOpenLoop { seed, .. } => format!("open-loop-{seed}"),
            Challenger::Feedback => "feedback".into(),
        }
    }
}

/// The smooth random open-loop schedule of a challenger.
pub fn random_open_loop(model: &CoefficientModel, seed: u64, amplitude: f64) -> OpenLoopControl {
    let n = model.basis().n();
    let grid = model.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, streams::CHALLENGER));
    let a: Vec<f64> = (0..3 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let values = (0..=grid.steps())
        .map(|i| {
            let s = grid.time(i) / grid.t_final();
            DVector::from_fn(n, |k, _| {
                amplitude
                    * (1..=3)
                        .map(|m| a[3 * k + m - 1] * (m as f64 * std::f64::consts::PI * s).sin())
                        .sum::<f64>()
            })
        })
        .collect();
    OpenLoopControl {
        label: format!("open-loop-{seed}"),
        values,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ChallengerResult {
    pub name: String,
    pub mean_cost: f64,
    pub std_error: f64,
    /// Mean of `cost(challenger) - cost(feedback)` on common paths.
    pub difference: f64,
    pub difference_std_error: f64,
    pub feedback_not_worse: bool,
    pub feedback_strictly_better: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeReport {
    pub n_paths: usize,
    pub feedback_mean: f64,
    pub feedback_std_error: f64,
    pub challengers: Vec<ChallengerResult>,
    pub passed: bool,
}

/// Compares the feedback law with challengers on common random numbers.
pub fn suboptimality_probe(
    x: &DVector<f64>,
    solution: &BackwardSolution,
    model: &CoefficientModel,
    challengers: &[Challenger],
    n_paths: usize,
    seed: u64,
) -> Result<ProbeReport> {
    check_solution(solution, model)?;
    let paths = sample_paths(model.grid(), n_paths, derive_seed(seed, streams::VERIFY))?;
    let sqrt_s = SqrtSource::new(model)?;
    let fb = FeedbackPolicy { solution };
    let fb_costs = ensemble_costs(x, &fb, model, &paths, &sqrt_s)?;
    let fb_est = Estimate::from_samples(&fb_costs);
    let mut results = Vec::new();
    for ch in challengers {
        let costs = match ch {
            Challenger::Zero => ensemble_costs(x, &ZeroControl, model, &paths, &sqrt_s)?,
            Challenger::RandomOpenLoop { seed, amplitude } => {
                let pol = random_open_loop(model, *seed, *amplitude);
                ensemble_costs(x, &pol, model, &paths, &sqrt_s)?
            }
            Challenger::Feedback => ensemble_costs(x, &fb, model, &paths, &sqrt_s)?,
        };
        let est = Estimate::from_samples(&costs);
        let diffs: Vec<f64> = costs.iter().zip(&fb_costs).map(|(c, f)| c - f).collect();
        let d = Estimate::from_samples(&diffs);
        results.push(ChallengerResult {
            name: ch.label(),
            mean_cost: est.mean,
            std_error: est.std_error,
            difference: d.mean,
            difference_std_error: d.std_error,
            feedback_not_worse: d.mean >= -3.0 * d.std_error,
            feedback_strictly_better: d.mean > 3.0 * d.std_error,
        });
    }
    Ok(ProbeReport {
        n_paths,
        feedback_mean: fb_est.mean,
        feedback_std_error: fb_est.std_error,
        passed: results.iter().all(|r| r.feedback_not_worse),
        challengers: results,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompletionReport {
    pub policy: String,
    pub n_paths: usize,
    pub mean_residual: f64,
    pub std_error: f64,
    pub z_score: f64,
}

/// `cost(u) - ⟨P(0)x, x⟩ - Σ_i h |B'P y_i + u_i|²` averaged over paths.
pub fn completion_of_squares(
    x: &DVector<f64>,
    solution: &BackwardSolution,
    model: &CoefficientModel,
    policy: &dyn ControlPolicy,
    n_paths: usize,
    seed: u64,
) -> Result<CompletionReport> {
    check_solution(solution, model)?;
    let paths = sample_paths(model.grid(), n_paths, derive_seed(seed, streams::VERIFY))?;
    let sqrt_s = SqrtSource::new(model)?;
    let predicted = predicted_value(solution, x);
    let h = model.grid().h();
    let l = model.grid().steps();
    let residuals: Vec<f64> = paths
        .par_iter()
        .map(|p| {
            let run = run_policy(x, policy, model, p, &sqrt_s)?;
            let mut gap = Vec::with_capacity(l);
            for i in 0..l {
                let y = &run.trajectory.states[i];
                let b = &model.at(i, p.w(i))?.b;
                let v = b.transpose() * (solution.p_at(i, p.w(i)) * y) + &run.trajectory.controls[i];
                gap.push(h * v.norm_squared());
            }
            Ok(run.cost - predicted - pairwise_sum(&gap))
        })
        .collect::<Result<_>>()?;
    let est = Estimate::from_samples(&residuals);
    Ok(CompletionReport {
        policy: policy.name(),
        n_paths,
        mean_residual: est.mean,
        std_error: est.std_error,
        z_score: est.z_score(0.0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_products() {
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let id = DMatrix::identity(2, 2);
        assert_eq!(feedback(&id, &id, &y).unwrap(), -&y);
        assert_eq!(feedback(&id, &DMatrix::zeros(2, 2), &y).unwrap(), DVector::zeros(2));
        let p = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 3.0]));
        let b = &id * 0.7;
        let u = feedback(&p, &b, &y).unwrap();
        assert_eq!(u[0], -0.7 * 0.5 * 1.0);
        assert_eq!(u[1], -0.7 * 3.0 * -2.0);
        assert!(feedback(&DMatrix::identity(3, 3), &id, &y).is_err());
    }
}
