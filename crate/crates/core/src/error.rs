use thiserror::Error;

/// Errors raised by the model, solvers, oracle and calibration routines.
///
/// The variant names are part of the CLI contract: they are printed verbatim
/// when a command fails.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("EmptyAtomList: period {period} has no scenario atoms")]
    EmptyAtomList { period: usize },

    #[error("ProbabilityNotNormalized: atom probabilities sum to {sum} (period {period})")]
    ProbabilityNotNormalized { period: usize, sum: f64 },

    #[error("SchemaError: {0}")]
    Schema(String),

    #[error("DegenerateDenominator: risky return is indistinguishable from the reference (E[P^2] = {value:e}, period {period})")]
    DegenerateDenominator { period: usize, value: f64 },

    #[error("LinearStage: b = 0 in the final period leaves the stage problem linear")]
    LinearStage,

    #[error("MissingAtoms: period {period} carries moments only, scenario atoms are required")]
    MissingAtoms { period: usize },

    #[error("UnboundedAbove: stage objective increases without bound")]
    UnboundedAbove,

    #[error("SingularMoments: E[PP'] is not positive definite (period {period})")]
    SingularMoments { period: usize },

    #[error("NonpositiveCurvature: effective quadratic coefficient {value:e} <= 0 at stage {stage}")]
    NonpositiveCurvature { stage: usize, value: f64 },

    #[error("GridTooCoarse: value function interpolation at stage {stage} violates concavity by {violation:e}")]
    GridTooCoarse { stage: usize, violation: f64 },

    #[error("NoConvergence: {what} stopped after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("TargetAtMean: target equals the mean wealth in period {period}")]
    TargetAtMean { period: usize },

    #[error("RegimeCrossing: reachable states of period {period} straddle a policy breakpoint")]
    RegimeCrossing { period: usize },

    #[error("InstanceTooLarge: {0}")]
    InstanceTooLarge(String),

    #[error("InvalidInput: {0}")]
    InvalidInput(String),
}

impl Error {
    /// Short variant name, used by the CLI and the C ABI.
    pub fn name(&self) -> &'static str {
        match self {
            Error::EmptyAtomList { .. } => "EmptyAtomList",
            Error::ProbabilityNotNormalized { .. } => "ProbabilityNotNormalized",
            Error::Schema(_) => "SchemaError",
            Error::DegenerateDenominator { .. } => "DegenerateDenominator",
            Error::LinearStage => "LinearStage",
            Error::MissingAtoms { .. } => "MissingAtoms",
            Error::UnboundedAbove => "UnboundedAbove",
            Error::SingularMoments { .. } => "SingularMoments",
            Error::NonpositiveCurvature { .. } => "NonpositiveCurvature",
            Error::GridTooCoarse { .. } => "GridTooCoarse",
            Error::NoConvergence { .. } => "NoConvergence",
            Error::TargetAtMean { .. } => "TargetAtMean",
            Error::RegimeCrossing { .. } => "RegimeCrossing",
            Error::InstanceTooLarge(_) => "InstanceTooLarge",
            Error::InvalidInput(_) => "InvalidInput",
        }
    }

    /// Input and schema problems, as opposed to failures of a solver on a valid instance.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::EmptyAtomList { .. }
                | Error::ProbabilityNotNormalized { .. }
                | Error::InvalidInput(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
