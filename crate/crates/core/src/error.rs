/// Errors shared across the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A linear solve hit a (numerically) singular system.
    #[error("singular linear system in {0}")]
    SingularSystem(&'static str),

    /// A matrix that must be Hurwitz is not (or cannot be certified).
    #[error("matrix is not Hurwitz: {0}")]
    NotHurwitz(&'static str),

    /// The Riccati sign-function iteration failed to converge; the problem
    /// has no stabilizing solution or is too ill-conditioned to resolve.
    #[error("no stabilizing Riccati solution: sign iteration did not converge in {0} steps")]
    NoStabilizingSolution(usize),

    /// A solver finished but the solution failed its residual bound.
    #[error("residual check failed in {0}")]
    ResidualCheck(&'static str),

    #[error("{name} must satisfy {constraint}")]
    Domain {
        name: &'static str,
        constraint: &'static str,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    /// A derivative evaluation produced a non-finite component during
    /// integration; carries the time and flat-state component index.
    #[error("non-finite derivative at t = {t} (component {component})")]
    NonFiniteDerivative { t: f64, component: usize },

    #[error("configuration error: {0}")]
    Config(String),

    /// A mode that is exposed as a flag but intentionally not implemented.
    #[error("unsupported mode: {0}")]
    Unsupported(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;
