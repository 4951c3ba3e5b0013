pub mod cli;
pub mod coefficients;
pub mod config;
pub mod control;
pub mod error;
pub mod expr;
pub mod flow;
pub mod lyapunov;
pub mod regression;
pub mod report;
pub mod riccati;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
