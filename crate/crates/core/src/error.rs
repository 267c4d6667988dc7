//! Error type shared across the workbench.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular basis: |det| = {det:e} is below the tolerance {tol:e}")]
    SingularBasis { det: f64, tol: f64 },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("matrix is not unimodular: determinant {det} is not +/-1")]
    NotUnimodular { det: String },

    #[error("matrix is not special linear: determinant {det} is not +1 (negate one column first, e.g. via factor_with_sign)")]
    NotSpecialLinear { det: String },

    #[error("invalid extended Gauss move: {0}")]
    InvalidMove(String),

    #[error("Bezout system is infeasible: gcd {gcd} does not divide target {target}")]
    BezoutInfeasible { gcd: String, target: String },

    #[error("coprimification search exhausted |t| <= {t_max} (should be unreachable for unimodular input)")]
    CoprimifyExhausted { t_max: i64 },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("iteration cap {cap} exceeded (numerical non-termination suspected)")]
    IterationCapExceeded { cap: usize },

    #[error("tensor shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("backward pass requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("log of non-positive value {0}")]
    LogNonPositive(f64),

    #[error("matrix is not symmetric: |G[{i}][{j}] - G[{j}][{i}]| = {diff:e}")]
    NonSymmetric { i: usize, j: usize, diff: f64 },

    #[error("matrix is not positive definite (leading minor {k} is {minor:e})")]
    NotPositiveDefinite { k: usize, minor: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("training diverged at epoch {epoch} (seed {seed}): loss = {loss}")]
    Divergence { epoch: usize, seed: u64, loss: f64 },

    #[error("empty report: no per-matrix records to analyze")]
    EmptyReport,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
