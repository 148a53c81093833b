use thiserror::Error;

/// Errors shared across the crate.
///
/// Validation failures (bad inputs, violated preconditions) are kept apart
/// from numerical failures (non-convergence, overflow, broken internal
/// invariants) so callers can map them to distinct exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("connectivity matrix violates (H1): {0}")]
    H1Violation(String),

    #[error("periodic coefficients violate (H2): {0}")]
    H2Violation(String),

    #[error("(H3) fails: growth bound {omega:.6e} is not negative")]
    H3Violation { omega: f64 },

    #[error("eigenvalue iteration failed to converge for a {n}x{n} matrix")]
    EigenConvergence { n: usize },

    #[error("power iteration did not converge within {cap} iterations")]
    PowerIterationCap { cap: usize },

    #[error("internal inconsistency: {0}")]
    Inconsistency(String),

    #[error("zero-eigenbasis assembly failed: residual {residual:.3e} in {check}")]
    BasisAssembly { check: &'static str, residual: f64 },

    #[error("non-finite value during integration at step {step}")]
    IntegrationOverflow { step: usize },

    #[error("reproduction ratio exceeds bracket ceiling {ceiling:.1e}; check (H2)/(H3)")]
    R0Unbounded { ceiling: f64 },
}

impl Error {
    /// True for errors caused by bad inputs rather than numerical trouble.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidMatrix(_)
                | Error::Precondition(_)
                | Error::H1Violation(_)
                | Error::H2Violation(_)
                | Error::H3Violation { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
