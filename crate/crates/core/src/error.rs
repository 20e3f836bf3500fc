use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate triangle {index}: area {area:e} below {threshold:e}")]
    DegenerateTriangle {
        index: usize,
        area: f64,
        threshold: f64,
    },

    #[error("parameter out of range: {0}")]
    OutOfRange(String),

    #[error("ellipticity violated: {0}")]
    Ellipticity(String),

    #[error("operator is not self-adjoint: {0}")]
    NotSelfAdjoint(String),

    #[error("incompatible data: |integral| = {integral:e} exceeds {tolerance:e}")]
    Compatibility { integral: f64, tolerance: f64 },

    #[error("no convergence after {iterations} iterations, relative residual {residual:e}")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("t = {t} is below the certified t_min = {t_min}")]
    Truncation { t: f64, t_min: f64 },

    #[error("zeta = {zeta} lies within {distance:e} of the spectrum")]
    SpectrumProximity { zeta: Complex64, distance: f64 },

    #[error("quadrature did not converge, estimated error {estimate:e}")]
    Quadrature { estimate: f64 },

    #[error("unresolved spectrum: {0}")]
    Unresolved(String),

    #[error("probe not in range, projection residual {0:e}")]
    ProbeNotInRange(f64),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("eigensolver failure: {0}")]
    Eigen(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
