use thiserror::Error;

/// Errors produced by the solvers, simulators and validators.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("integration diverged at node {node} (t = {t})")]
    IntegrationDiverged { node: usize, t: f64 },

    #[error("Riccati sweep blew up; last finite node {last_finite_node}")]
    RiccatiBlowup { last_finite_node: usize },

    #[error("time {t} outside grid [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("algebraic Riccati equation failed: {0}")]
    AreFailure(String),

    #[error("fixed point did not converge after {iterations} iterations (last residual {last_residual:e})")]
    FixedPointFailure {
        iterations: usize,
        last_residual: f64,
        residuals: Vec<f64>,
    },

    #[error("unsupported oracle: {0}")]
    UnsupportedOracle(String),

    #[error("joint state dimension {dim} exceeds guard {limit}")]
    DimensionGuard { dim: usize, limit: usize },

    #[error("simulated path {path} diverged at node {node}")]
    DivergedPath { path: usize, node: usize },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
