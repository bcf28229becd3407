use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One broken dataset rule, located as precisely as the rule allows.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub unit: String,
    pub period: Option<i64>,
    pub rule: Rule,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rule {
    /// Unit has no period with outcome and all covariates present.
    EmptyUnit,
    /// Location differs across the unit's observed periods.
    LocationDrift { first: String, other: String },
    /// NaN or infinity in an observed cell.
    NonFinite { field: String },
    /// Weight or poverty line missing on an otherwise observed cell.
    MissingValue { field: String },
    NegativeWeight,
    DuplicateCell,
    /// Record carries the wrong number of covariate slots.
    CovariateArity { expected: usize, found: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "unit {}", self.unit)?;
        if let Some(p) = self.period {
            write!(f, ", period {p}")?;
        }
        match &self.rule {
            Rule::EmptyUnit => write!(f, ": EmptyUnit (no observed period)"),
            Rule::LocationDrift { first, other } => {
                write!(f, ": LocationDrift ({first} then {other})")
            }
            Rule::NonFinite { field } => write!(f, ": NonFinite ({field})"),
            Rule::MissingValue { field } => write!(f, ": MissingValue ({field})"),
            Rule::NegativeWeight => write!(f, ": NegativeWeight"),
            Rule::DuplicateCell => write!(f, ": DuplicateCell"),
            Rule::CovariateArity { expected, found } => {
                write!(f, ": CovariateArity (expected {expected}, found {found})")
            }
        }
    }
}

/// Every violation found while validating a raw panel.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Set when the panel has no units, periods or locations at all.
    pub empty_panel: bool,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty() && !self.empty_panel
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.empty_panel {
            writeln!(f, "panel has no units")?;
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid panel:\n{0}")]
    Validation(ValidationReport),

    #[error("group-time effect undefined for unit {unit} (group {group}, period {period})")]
    UndefinedAlpha {
        unit: String,
        group: usize,
        period: i64,
    },

    #[error("no observed cells")]
    NoObservations,

    #[error("no feasible group for unit {unit}: every candidate has an undefined period effect")]
    NoFeasibleGroup { unit: String },

    #[error("units observed too few times for the holdout: {units:?}")]
    UnitObservedOnce { units: Vec<String> },

    #[error("degrees of freedom exhausted: {n_obs} observations for {n_params} parameters")]
    DegreesOfFreedomExhausted { n_obs: usize, n_params: usize },

    #[error("no scorable test cells ({excluded} excluded for undefined effects)")]
    NoScorableCells { excluded: usize },

    #[error("covariates unavailable for unit {unit} at period {period}")]
    MissingCovariates { unit: String, period: i64 },

    #[error("covariate column '{column}' has no completion rule but is needed for an imputed cell")]
    UntaggedColumn { column: String },

    #[error("zero total weight for key {key}")]
    ZeroWeightCell { key: String },

    #[error("tables share no end period")]
    NoOverlap,

    #[error("could not draw an admissible observation pattern for unit {unit} after {attempts} attempts")]
    InfeasibleRotation { unit: usize, attempts: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}
