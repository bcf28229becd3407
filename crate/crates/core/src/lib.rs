//! Grouped fixed effects estimation for unbalanced rotating panels.
//!
//! Units are classified into latent groups that share a period-specific
//! intercept path; the partition and the parameters are estimated jointly by
//! variable neighborhood search around a masked least-squares update. Fitted
//! welfare paths feed poverty-status, transition and duration summaries.

#![allow(clippy::needless_range_loop)]

pub mod completion;
pub mod dgp;
pub mod error;
pub mod ols;
pub mod panel;
pub mod partition;
pub mod poverty;
pub mod search;
pub mod selection;

pub use error::{Error, Result};
pub use ols::{ols_update, residuals, DesignSpec, MaskedOls, OlsUpdate};
pub use panel::{
    objective, validate_dataset, FitConfig, GroupAssignment, GroupTimeEffects, ModelParams,
    PanelDataset, RawPanel, RawRecord,
};
pub use partition::adjusted_rand_index;
pub use search::{
    assign_groups, initialize, local_search, multi_start_fit, pick_best, refine, stream_seed, vns_fit,
    vns_fit_observed, FitResult, RefineTrace, SearchObserver,
};
pub use dgp::{generate, separation, DgpSpec, Truth};
pub use selection::{
    bic, bic_value, holdout_rmse, last_year_holdout, last_years_holdout, parameter_count, select_g,
    HoldoutSplit, Selection, SelectionRow,
};
pub use poverty::{
    duration_summaries, group_profiles, holdout_classification, one_step_validation, poverty_status,
    predict, predict_cell, transition_fit, transition_table, weighted_rate, PovertyStatus,
    TransitionTable,
};
pub use completion::{
    complete_covariates, complete_paths, ColumnRule, CompletedCovariates, CompletedPanel,
    CompletionPolicy, Fill, Source,
};
