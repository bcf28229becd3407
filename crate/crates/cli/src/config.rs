//! Run configuration, read from a JSON file and overridden by flags.

use std::path::{Path, PathBuf};

use gfe_core::completion::ColumnRule;
use gfe_core::FitConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMap {
    pub unit: String,
    pub period: String,
    pub outcome: String,
    pub weight: String,
    pub location: String,
    pub poverty_line: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            unit: "unit".into(),
            period: "period".into(),
            outcome: "outcome".into(),
            weight: "weight".into(),
            location: "location".into(),
            poverty_line: "poverty_line".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateColumn {
    pub name: String,
    /// Rule used to fill the column in unobserved periods.
    #[serde(default)]
    pub completion: Option<ColumnRule>,
    /// Covariate-set labels (e.g. "spec1", "spec2") this column belongs to.
    #[serde(default)]
    pub sets: Vec<String>,
}

/// Keeps rows whose value in `column` lies in `[min, max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeFilter {
    pub column: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    pub n_starts: usize,
    pub itermax: usize,
    pub neighmax: usize,
    pub max_local_iters: usize,
    pub seed: u64,
    pub sse_rel_tol: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        let d = FitConfig::default();
        Self {
            n_starts: d.n_starts,
            itermax: d.itermax,
            neighmax: d.neighmax,
            max_local_iters: d.max_local_iters,
            seed: d.base_seed,
            sse_rel_tol: d.sse_rel_tol,
        }
    }
}

impl FitSettings {
    pub fn to_fit_config(&self, n_groups: usize) -> FitConfig {
        FitConfig {
            n_groups,
            n_starts: self.n_starts,
            itermax: self.itermax,
            neighmax: self.neighmax,
            max_local_iters: self.max_local_iters,
            base_seed: self.seed,
            sse_rel_tol: self.sse_rel_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub columns: ColumnMap,
    pub covariates: Vec<CovariateColumn>,
    /// Use only the covariates tagged with this set label.
    pub covariate_set: Option<String>,
    /// Apply ln(x + sqrt(x^2 + 1)) to outcome and poverty line.
    pub ihs: bool,
    pub min_rounds: usize,
    pub filters: Vec<RangeFilter>,
    pub reference_location: Option<String>,
    pub n_groups: usize,
    pub fit: FitSettings,
    pub g_grid: Vec<usize>,
    pub fine_n_starts: usize,
    pub shortlist: usize,
    /// Periods held out per unit by `validate` (1 = last observed period).
    pub holdout_periods: usize,
    /// Poor in at least this many periods counts as chronic.
    pub chronic_min: usize,
    /// Covariates summarized at baseline in group profiles; all by default.
    pub baseline_covariates: Option<Vec<String>>,
    /// Output location is not part of the echoed configuration.
    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            columns: ColumnMap::default(),
            covariates: Vec::new(),
            covariate_set: None,
            ihs: false,
            min_rounds: 2,
            filters: Vec::new(),
            reference_location: None,
            n_groups: 1,
            fit: FitSettings::default(),
            g_grid: (1..=10).collect(),
            fine_n_starts: 10,
            shortlist: 6,
            holdout_periods: 1,
            chronic_min: 3,
            baseline_covariates: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        // relative input paths are taken from the config file's directory
        if let (Some(input), Some(dir)) = (&cfg.input, path.parent()) {
            if input.is_relative() {
                cfg.input = Some(dir.join(input));
            }
        }
        Ok(cfg)
    }

    /// Covariate columns in use, after applying `covariate_set`.
    pub fn active_covariates(&self) -> Vec<&CovariateColumn> {
        self.covariates
            .iter()
            .filter(|c| match &self.covariate_set {
                Some(set) => c.sets.iter().any(|s| s == set),
                None => true,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_rounds < 2 {
            return Err(CliError::Config("min_rounds must be >= 2".into()));
        }
        if self.holdout_periods == 0 {
            return Err(CliError::Config("holdout_periods must be >= 1".into()));
        }
        if let Some(set) = &self.covariate_set {
            if !self.covariates.iter().any(|c| c.sets.contains(set)) {
                return Err(CliError::Config(format!("no covariate is tagged with set '{set}'")));
            }
        }
        for f in &self.filters {
            if let (Some(lo), Some(hi)) = (f.min, f.max) {
                if lo > hi {
                    return Err(CliError::Config(format!("filter on '{}' has min > max", f.column)));
                }
            }
        }
        Ok(())
    }
}

/// Parses "1..6" (inclusive), "2-5" or "1,3,5".
pub fn parse_grid(s: &str) -> Result<Vec<usize>> {
    let bad = || CliError::Config(format!("cannot parse group grid '{s}'"));
    let range = s.split_once("..").or_else(|| s.split_once('-'));
    let mut out: Vec<usize> = if let Some((a, b)) = range {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    out.sort_unstable();
    out.dedup();
    if out.is_empty() || out[0] == 0 {
        return Err(bad());
    }
    Ok(out)
}
