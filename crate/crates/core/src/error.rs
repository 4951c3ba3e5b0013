use thiserror::Error;

/// Errors raised by the solvers, the model layer and the command line driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("bound violation: {quantity} = {value:.6e} exceeds declared bound {bound:.6e} at t = {time:.6e}")]
    BoundViolation {
        quantity: String,
        value: f64,
        bound: f64,
        time: f64,
    },

    #[error("ball violation: sup |P| = {norm:.6e} exceeds radius r = {radius:.6e} on window starting at t = {window_start:.6e}")]
    BallViolation {
        norm: f64,
        radius: f64,
        window_start: f64,
    },

    #[error("no convergence on window starting at t = {window_start:.6e} after {iterations} iterations (last residual {last:.6e})", last = residuals.last().copied().unwrap_or(f64::NAN))]
    NonConvergence {
        window_start: f64,
        iterations: usize,
        residuals: Vec<f64>,
    },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("expression error: {0}")]
    Expression(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used in the JSON error channel of the CLI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::Domain(_) => "domain",
            Error::ContractViolation(_) => "contract_violation",
            Error::BoundViolation { .. } => "bound_violation",
            Error::BallViolation { .. } => "ball_violation",
            Error::NonConvergence { .. } => "non_convergence",
            Error::SolverFailure(_) => "solver_failure",
            Error::OracleFailure(_) => "oracle_failure",
            Error::Expression(_) => "expression",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
