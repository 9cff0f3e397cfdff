use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("basis matrix is singular or not square")]
    SingularBasis,
    #[error("stencil is not symmetric: {0:?} has no negative")]
    StencilNotSymmetric(Vec<i64>),
    #[error("stencil does not span the lattice")]
    StencilDoesNotSpan,
    #[error("stencil vector {0:?} is not a lattice vector")]
    NotLatticeVector(Vec<f64>),
    #[error("site {0:?} is outside the window")]
    OutOfWindow(Vec<i64>),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("derivative order {0} is not supported here")]
    UnsupportedOrder(usize),
    #[error("defect site {0:?} lies outside the defect radius")]
    DefectOutsideRadius(Vec<i64>),
    #[error("invalid order {0}")]
    InvalidOrder(i64),
    #[error("quadratic multiplier is singular at k = {0:?}")]
    SingularH2(Vec<f64>),
    #[error("model is not lattice stable (c0 estimate {0})")]
    UnstableModel(f64),
    #[error("supercell too small: extrapolation error estimate {estimate:e} exceeds {tolerance:e}")]
    SupercellTooSmall { estimate: f64, tolerance: f64 },
    #[error("window too small: {0}")]
    WindowTooSmall(String),
    #[error("singular argument for J_{0}")]
    SingularArgument(i32),
    #[error("angular quadrature did not converge (last change {0:e})")]
    QuadratureNotConverged(f64),
    #[error("moment tail is not summable: {0}")]
    NonSummableTail(String),
    #[error("multipole basis is degenerate")]
    BasisDegenerate,
    #[error("kernel of order {0} is not available")]
    KernelOrderMissing(usize),
    #[error("anisotropic dislocation field not supported: {0}")]
    AnisotropyUnsupported(String),
    #[error("missing predecessor: {0}")]
    MissingPredecessor(String),
    #[error("angular/radial mode truncation did not converge: {0}")]
    ModeTruncationNotConverged(String),
    #[error("operator is not scalar (N = {0})")]
    NonScalarOperator(usize),
    #[error("evaluation outside the available domain: {0}")]
    EvaluationDomainExceeded(String),
    #[error("solver did not converge after {iterations} iterations (gradient norm {gradient_norm:e})")]
    NotConverged { iterations: usize, gradient_norm: f64 },
    #[error("instability detected: Rayleigh quotient {0:e}")]
    InstabilityDetected(f64),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("unknown model '{0}'")]
    UnknownModel(String),
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the error means a numerical procedure failed rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotConverged { .. }
                | Error::InstabilityDetected(_)
                | Error::QuadratureNotConverged(_)
                | Error::SupercellTooSmall { .. }
                | Error::ModeTruncationNotConverged(_)
                | Error::SingularH2(_)
                | Error::UnstableModel(_)
                | Error::NonSummableTail(_)
        )
    }
}
