//! Covariate completion over the full period window and model-completed
//! welfare paths.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{GroupAssignment, ModelParams, PanelDataset};
use crate::poverty::{poverty_status, predict, PovertyStatus};

/// How a covariate column is filled in periods where a unit is not
/// observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnRule {
    /// Nearest earlier observation, else nearest later one.
    TimeInvariant,
    /// Nearest observation shifted by the signed calendar gap.
    Age,
    /// Value at the unit's first observed period.
    HoldFirst,
    /// Linear in calendar time between the surrounding observations; carried
    /// flat outside them.
    Interpolate,
}

/// Provenance of one completed covariate value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fill {
    Observed,
    CarryForward,
    CarryBackward,
    AgeForward,
    /// Age moved back in time: the mirror image of the forward rule.
    AgeBackward,
    HoldFirst,
    Interpolated,
}

/// One rule per covariate column; `None` leaves the column untagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionPolicy {
    pub id: String,
    pub rules: Vec<Option<ColumnRule>>,
}

impl CompletionPolicy {
    pub fn uniform(id: &str, rule: ColumnRule, n_columns: usize) -> Self {
        Self {
            id: id.to_string(),
            rules: vec![Some(rule); n_columns],
        }
    }
}

/// Covariates for every unit and period of the panel.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedCovariates {
    n_periods: usize,
    n_covariates: usize,
    values: Vec<f64>,
    fills: Vec<Fill>,
}

impl CompletedCovariates {
    fn at(&self, unit: usize, period: usize) -> std::ops::Range<usize> {
        let start = (unit * self.n_periods + period) * self.n_covariates;
        start..start + self.n_covariates
    }

    pub fn values(&self, unit: usize, period: usize) -> &[f64] {
        &self.values[self.at(unit, period)]
    }

    pub fn fills(&self, unit: usize, period: usize) -> &[Fill] {
        &self.fills[self.at(unit, period)]
    }
}

fn fill_one(rule: ColumnRule, t: i64, obs: &[(i64, f64)]) -> (f64, Fill) {
    let before = obs.iter().rev().find(|o| o.0 < t);
    let after = obs.iter().find(|o| o.0 > t);
    match rule {
        ColumnRule::TimeInvariant => match (before, after) {
            (Some(b), _) => (b.1, Fill::CarryForward),
            (None, Some(a)) => (a.1, Fill::CarryBackward),
            (None, None) => unreachable!("unit has an observation"),
        },
        ColumnRule::HoldFirst => (obs[0].1, Fill::HoldFirst),
        ColumnRule::Age => {
            let use_before = match (before, after) {
                (Some(b), Some(a)) => t - b.0 <= a.0 - t,
                (Some(_), None) => true,
                _ => false,
            };
            if use_before {
                let b = before.unwrap();
                (b.1 + (t - b.0) as f64, Fill::AgeForward)
            } else {
                let a = after.unwrap();
                (a.1 - (a.0 - t) as f64, Fill::AgeBackward)
            }
        }
        ColumnRule::Interpolate => match (before, after) {
            (Some(b), Some(a)) => {
                let f = (t - b.0) as f64 / (a.0 - b.0) as f64;
                (b.1 + f * (a.1 - b.1), Fill::Interpolated)
            }
            (Some(b), None) => (b.1, Fill::CarryForward),
            (None, Some(a)) => (a.1, Fill::CarryBackward),
            (None, None) => unreachable!("unit has an observation"),
        },
    }
}

/// Fills every covariate for every unit and period of `data`, taking period
/// ids as calendar time. Observed cells are copied unchanged.
pub fn complete_covariates(data: &PanelDataset, policy: &CompletionPolicy) -> Result<CompletedCovariates> {
    let k = data.n_covariates();
    if policy.rules.len() != k {
        return Err(Error::InvalidConfig(format!(
            "policy has {} rules for {k} covariates",
            policy.rules.len()
        )));
    }
    let n_t = data.n_periods();
    let any_gap = (0..data.n_units()).any(|u| data.unit_obs_count(u) < n_t);
    if any_gap {
        if let Some(j) = policy.rules.iter().position(Option::is_none) {
            return Err(Error::UntaggedColumn {
                column: data.covariate_names()[j].clone(),
            });
        }
    }
    let mut out = CompletedCovariates {
        n_periods: n_t,
        n_covariates: k,
        values: vec![0.0; data.n_units() * n_t * k],
        fills: vec![Fill::Observed; data.n_units() * n_t * k],
    };
    let ids = data.period_ids();
    for u in 0..data.n_units() {
        let cells = data.unit_cells(u);
        for j in 0..k {
            let obs: Vec<(i64, f64)> = cells
                .clone()
                .map(|c| (ids[data.cell_period(c)], data.covariates(c)[j]))
                .collect();
            let mut next = cells.start;
            for t in 0..n_t {
                let idx = out.at(u, t).start + j;
                if next < cells.end && data.cell_period(next) == t {
                    out.values[idx] = data.covariates(next)[j];
                    next += 1;
                } else {
                    let rule = policy.rules[j].expect("checked above");
                    let (v, f) = fill_one(rule, ids[t], &obs);
                    out.values[idx] = v;
                    out.fills[idx] = f;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Observed,
    Imputed,
    /// Not observed and the unit's group has no effect in that period.
    Absent,
}

/// Welfare path of every unit over a window of periods.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedPanel {
    pub policy: String,
    /// Period indices of the window, ascending.
    pub window: Vec<usize>,
    /// `y[unit][w]` for window position `w`.
    pub y: Vec<Vec<Option<f64>>>,
    pub source: Vec<Vec<Source>>,
    pub n_absent: usize,
}

impl CompletedPanel {
    /// Poverty status along each path. Observed cells use their own line;
    /// other cells use the period's common line, and have no status when
    /// lines differ across units in that period.
    pub fn statuses(&self, data: &PanelDataset) -> Vec<Vec<Option<PovertyStatus>>> {
        let lines = data.period_poverty_lines();
        (0..self.y.len())
            .map(|u| {
                self.window
                    .iter()
                    .enumerate()
                    .map(|(w, &t)| {
                        let y = self.y[u][w]?;
                        let z = match self.source[u][w] {
                            Source::Observed => data.poverty_line(data.find_cell(u, t)?),
                            _ => lines[t]?,
                        };
                        Some(poverty_status(y, z))
                    })
                    .collect()
            })
            .collect()
    }
}

/// Observed outcomes where available, model predictions with completed
/// covariates elsewhere. Cells whose group effect is undefined are left
/// absent and counted.
pub fn complete_paths(
    params: &ModelParams,
    gamma: &GroupAssignment,
    data: &PanelDataset,
    covariates: &CompletedCovariates,
    window: &[usize],
    policy_id: &str,
) -> Result<CompletedPanel> {
    let mut y = Vec::with_capacity(data.n_units());
    let mut source = Vec::with_capacity(data.n_units());
    let mut n_absent = 0;
    for u in 0..data.n_units() {
        let mut yu = Vec::with_capacity(window.len());
        let mut su = Vec::with_capacity(window.len());
        for &t in window {
            if let Some(c) = data.find_cell(u, t) {
                yu.push(Some(data.outcome(c)));
                su.push(Source::Observed);
                continue;
            }
            match predict(params, gamma, data, u, t, Some(covariates.values(u, t))) {
                Ok(v) => {
                    yu.push(Some(v));
                    su.push(Source::Imputed);
                }
                Err(Error::UndefinedAlpha { .. }) => {
                    yu.push(None);
                    su.push(Source::Absent);
                    n_absent += 1;
                }
                Err(e) => return Err(e),
            }
        }
        y.push(yu);
        source.push(su);
    }
    Ok(CompletedPanel {
        policy: policy_id.to_string(),
        window: window.to_vec(),
        y,
        source,
        n_absent,
    })
}
