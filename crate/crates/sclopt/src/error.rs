//! Error type shared across the toolkit.

use thiserror::Error;

/// Errors produced by oracles, proximal operators, solvers, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {location}: {value}")]
    NonFinite { location: String, value: f64 },

    #[error("matrix is not symmetric (max asymmetry {max_asym:.3e})")]
    NotSymmetric { max_asym: f64 },

    #[error("matrix is not positive definite (Cholesky failed at pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },

    #[error("infeasible box: lo[{index}] = {lo} > hi[{index}] = {hi}")]
    InfeasibleBox { index: usize, lo: f64, hi: f64 },

    #[error(
        "inner prox solver did not reach tolerance {tol:.3e} after {iterations} iterations \
         (achieved residual {achieved:.3e})"
    )]
    ProxNoConvergence {
        tol: f64,
        achieved: f64,
        iterations: usize,
    },

    #[error("negative curvature {value:.3e} along direction; oracle is not convex")]
    NonConvexCurvature { value: f64 },

    #[error("singular curvature: lambda = 0 along a nonzero direction (beta = {beta:.3e})")]
    SingularCurvature { beta: f64 },

    #[error(
        "metric shrink cap exceeded at iteration {iteration}: \
         {shrinks} scalings without satisfying the descent condition"
    )]
    ShrinkCapExceeded { iteration: usize, shrinks: usize },

    #[error("formula domain violation: {0}")]
    FormulaDomain(String),

    #[error("insufficient curvature: all {samples} probe directions were degenerate")]
    InsufficientCurvature { samples: usize },

    #[error("not enough tail iterates for rate diagnostics: have {have}, need {need}")]
    InsufficientTrace { have: usize, need: usize },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("performance profile requires a non-empty table")]
    EmptyProfile,

    #[error("invalid option: {0}")]
    InvalidOption(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
