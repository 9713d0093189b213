use thiserror::Error;

/// Errors raised by the library. Validation problems and numerical failures
/// are kept apart so the CLI can map them to distinct exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty set")]
    EmptySet,
    #[error("empty restriction")]
    EmptyRestriction,
    #[error("kernel tail truncation failed")]
    KernelTailTruncation,
    #[error("n too small for schedule")]
    NTooSmall,
    #[error("perturbation radius exceeds validated bound")]
    PerturbationRadius,
    #[error("degenerate estimate")]
    DegenerateEstimate,
    #[error("quadrature grid does not cover the integration domain: {0}")]
    QuadratureCoverage(String),
    #[error("measure has {atoms} atoms, above the budget of {budget}; coarsen the grid")]
    OtBudget { atoms: usize, budget: usize },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// True for errors that stem from bad input rather than from the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid(_)
                | Error::EmptySet
                | Error::EmptyRestriction
                | Error::NTooSmall
                | Error::PerturbationRadius
                | Error::OtBudget { .. }
                | Error::QuadratureCoverage(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}
