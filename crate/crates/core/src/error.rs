use std::path::PathBuf;

use thiserror::Error;

use crate::exprlang::ExprError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad dimensions, non-positive delay or θ, incompatible step sizes.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("matrix is not Hurwitz: {0}")]
    NotHurwitz(String),

    /// A caller broke an operation's documented precondition.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("precondition violated: {0}")]
    PreconditionViolated(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error(transparent)]
    Expr(#[from] ExprError),

    #[error("no feasible theta in [1, {theta_max}]")]
    NoFeasibleTheta { theta_max: f64 },

    #[error("stability conditions not satisfied: {0}")]
    ConditionsNotSatisfied(String),

    #[error("simulation diverged at t = {t}")]
    Diverged { t: f64 },

    #[error("no data to plot")]
    NoData,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
