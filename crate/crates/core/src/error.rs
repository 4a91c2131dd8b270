use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure modes across the library. Numerical routines return errors for
/// contract violations (shape, symmetry, degeneracy) rather than panicking,
/// so callers such as the CLI can map them to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (asymmetry {asymmetry:.3e} exceeds {tolerance:.3e})")]
    NotSymmetric { asymmetry: f64, tolerance: f64 },

    #[error("eigensolver did not converge within {sweeps} sweeps (off-diagonal mass {off:.3e})")]
    NoConvergence { sweeps: usize, off: f64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("node index {index} out of range for {nodes} nodes")]
    InvalidIndex { index: usize, nodes: usize },

    #[error("invalid edge {src} -> {dst}: {reason}")]
    InvalidEdge { src: usize, dst: usize, reason: &'static str },

    #[error("node {0} has no incident edges; normalization is undefined")]
    IsolatedNode(usize),

    #[error("graph is not connected")]
    Disconnected,

    #[error("state matrix has zero Frobenius norm")]
    ZeroState,

    #[error("denominator subspace mass is zero")]
    ZeroDenominator,

    #[error("vector is not unit norm (norm {0:.6e})")]
    NotUnitNorm(f64),

    #[error("spectral gap assumption violated: {0}")]
    BadGap(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("series entry {index} is not strictly positive ({value})")]
    NonPositiveEntry { index: usize, value: f64 },

    #[error("row-stochastic floor infeasible: row {row} needs {entries} entries >= {floor}")]
    FloorInfeasible { row: usize, entries: usize, floor: f64 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}
