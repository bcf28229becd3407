use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("parse error at line {line}, column '{column}': {message}")]
    Parse {
        line: u64,
        column: String,
        message: String,
    },

    #[error("column '{0}' not found in input header")]
    MissingColumn(String),

    #[error("filters removed every row or unit")]
    FilterEliminatedAll,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] gfe_core::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Short machine-readable kind, used in the error line printed on exit.
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Parse { .. } => "ParseError",
            CliError::MissingColumn(_) => "MissingColumn",
            CliError::FilterEliminatedAll => "FilterEliminatedAll",
            CliError::Config(_) => "ConfigError",
            CliError::Core(e) => match e {
                gfe_core::Error::Validation(_) => "ValidationError",
                gfe_core::Error::UndefinedAlpha { .. } => "UndefinedAlpha",
                gfe_core::Error::NoObservations => "NoObservations",
                gfe_core::Error::NoFeasibleGroup { .. } => "NoFeasibleGroup",
                gfe_core::Error::UnitObservedOnce { .. } => "UnitObservedOnce",
                gfe_core::Error::DegreesOfFreedomExhausted { .. } => "DegreesOfFreedomExhausted",
                gfe_core::Error::NoScorableCells { .. } => "NoScorableCells",
                gfe_core::Error::MissingCovariates { .. } => "MissingCovariates",
                gfe_core::Error::UntaggedColumn { .. } => "UntaggedColumn",
                gfe_core::Error::ZeroWeightCell { .. } => "ZeroWeightCell",
                gfe_core::Error::NoOverlap => "NoOverlap",
                gfe_core::Error::InfeasibleRotation { .. } => "InfeasibleRotation",
                gfe_core::Error::InvalidConfig(_) => "InvalidConfig",
            },
            CliError::Csv(_) => "CsvError",
            CliError::Json(_) => "JsonError",
            CliError::Io(_) => "IoError",
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
