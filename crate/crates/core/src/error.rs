use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("point violates constraint {index} by {violation:e}")]
    InfeasiblePoint { index: usize, violation: f64 },

    #[error("vector is not in the normal cone (residual {residual:e})")]
    NotInCone { residual: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// The coderivative is only defined on directions orthogonal to every
    /// generator carrying a strictly positive multiplier.
    #[error("direction outside the coderivative domain: <x*_{index}, u> = {value:e}")]
    DomainViolation { index: usize, value: f64 },

    #[error("active generators are linearly dependent")]
    DependentGenerators,

    #[error("inadmissible initial state: {0}")]
    InfeasibleStart(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("iteration limit reached")]
    MaxIterExceeded,

    #[error("no consistent dual multipliers (best normalized residual {residual:e})")]
    NoConsistentDuals { residual: f64 },

    #[error("inconsistent refinement sequence: {0}")]
    InconsistentSequence(String),

    #[error("no contact pattern produced a feasible candidate")]
    NoFeasiblePattern,

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;
