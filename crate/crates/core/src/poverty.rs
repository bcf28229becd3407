//! Predicted welfare, poverty status, weighted rates, transition tables and
//! their validation.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{GroupAssignment, ModelParams, PanelDataset};
use crate::selection::HoldoutSplit;

/// Linear prediction `x'theta + alpha(g_i, t) + mu(p_i)` for `unit` at
/// period index `period`, using the supplied covariates.
pub fn predict(
    params: &ModelParams,
    gamma: &GroupAssignment,
    data: &PanelDataset,
    unit: usize,
    period: usize,
    covariates: Option<&[f64]>,
) -> Result<f64> {
    let x = covariates.ok_or_else(|| Error::MissingCovariates {
        unit: data.unit_ids()[unit].clone(),
        period: data.period_ids()[period],
    })?;
    let g = gamma.group_of(unit);
    let a = params.alpha.get(g, period).ok_or_else(|| Error::UndefinedAlpha {
        unit: data.unit_ids()[unit].clone(),
        group: g + 1,
        period: data.period_ids()[period],
    })?;
    Ok(params.offset(x, data.unit_location(unit)) + a)
}

/// Prediction at an observed cell.
pub fn predict_cell(params: &ModelParams, gamma: &GroupAssignment, data: &PanelDataset, cell: usize) -> Result<f64> {
    let c = data.cell(cell);
    predict(params, gamma, data, c.unit, c.period, Some(c.covariates))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PovertyStatus {
    Poor,
    Nonpoor,
}

impl PovertyStatus {
    pub fn is_poor(self) -> bool {
        self == PovertyStatus::Poor
    }
}

/// Poor iff `y < z`; a welfare level exactly at the line is not poor.
pub fn poverty_status(y: f64, z: f64) -> PovertyStatus {
    if y < z {
        PovertyStatus::Poor
    } else {
        PovertyStatus::Nonpoor
    }
}

/// Weighted poverty rate per key: `sum(w * poor) / sum(w)`.
pub fn weighted_rate<K: Ord + Clone + Debug>(
    rows: impl IntoIterator<Item = (K, PovertyStatus, f64)>,
) -> Result<BTreeMap<K, f64>> {
    let mut acc: BTreeMap<K, (f64, f64)> = BTreeMap::new();
    for (key, status, w) in rows {
        let e = acc.entry(key).or_default();
        e.1 += w;
        if status.is_poor() {
            e.0 += w;
        }
    }
    acc.into_iter()
        .map(|(k, (poor, total))| {
            if total > 0.0 {
                Ok((k, poor / total))
            } else {
                Err(Error::ZeroWeightCell { key: format!("{k:?}") })
            }
        })
        .collect()
}

/// Transition states in table order: poor to poor, poor to nonpoor, nonpoor
/// to poor, nonpoor to nonpoor.
pub const STATES: [&str; 4] = ["poor_poor", "poor_nonpoor", "nonpoor_poor", "nonpoor_nonpoor"];

fn state_index(from: PovertyStatus, to: PovertyStatus) -> usize {
    match (from, to) {
        (PovertyStatus::Poor, PovertyStatus::Poor) => 0,
        (PovertyStatus::Poor, PovertyStatus::Nonpoor) => 1,
        (PovertyStatus::Nonpoor, PovertyStatus::Poor) => 2,
        (PovertyStatus::Nonpoor, PovertyStatus::Nonpoor) => 3,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionPair {
    /// Period id of the end year.
    pub end_period: i64,
    pub from: PovertyStatus,
    pub to: PovertyStatus,
    /// End-year weight.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionRow {
    pub shares: [f64; 4],
    pub counts: [usize; 4],
    pub weights: [f64; 4],
    pub weight_total: f64,
}

/// Weighted transition shares keyed by end-period id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub rows: BTreeMap<i64, TransitionRow>,
}

impl TransitionTable {
    /// Builds a table straight from shares (e.g. an externally estimated
    /// one); counts and weights are left at zero.
    pub fn from_shares(rows: impl IntoIterator<Item = (i64, [f64; 4])>) -> Self {
        Self {
            rows: rows
                .into_iter()
                .map(|(t, shares)| {
                    (
                        t,
                        TransitionRow {
                            shares,
                            counts: [0; 4],
                            weights: [0.0; 4],
                            weight_total: 0.0,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Tabulates pairs by end period. Periods whose pairs carry no weight are
/// left out.
pub fn transition_table(pairs: &[TransitionPair]) -> TransitionTable {
    let mut acc: BTreeMap<i64, ([usize; 4], [f64; 4])> = BTreeMap::new();
    for p in pairs {
        let e = acc.entry(p.end_period).or_default();
        let s = state_index(p.from, p.to);
        e.0[s] += 1;
        e.1[s] += p.weight;
    }
    let rows = acc
        .into_iter()
        .filter_map(|(t, (counts, weights))| {
            let total: f64 = weights.iter().sum();
            (total > 0.0).then(|| {
                let shares = weights.map(|w| w / total);
                (
                    t,
                    TransitionRow {
                        shares,
                        counts,
                        weights,
                        weight_total: total,
                    },
                )
            })
        })
        .collect();
    TransitionTable { rows }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStepValidation {
    pub actual: TransitionTable,
    pub predicted: TransitionTable,
    /// Weighted share of end-year statuses predicted correctly.
    pub accuracy: f64,
    pub misclassification: f64,
    pub n_pairs: usize,
    /// Units whose held-out period does not directly follow their previous
    /// observed period.
    pub excluded_nonconsecutive: usize,
    /// Units whose group has no effect in the held-out period.
    pub excluded_undefined: usize,
}

/// One-step-ahead transitions on the last-observed-period holdout.
///
/// For each unit whose held-out period directly follows (in the panel's
/// period list) its previous observed period, the actual pair uses observed
/// statuses at both ends and the predicted pair replaces the end status with
/// the model's. Pairs are weighted by the end-period weight.
pub fn one_step_validation(
    params: &ModelParams,
    gamma: &GroupAssignment,
    data: &PanelDataset,
    split: &HoldoutSplit,
) -> Result<OneStepValidation> {
    let mut actual = Vec::new();
    let mut predicted = Vec::new();
    let (mut hit_w, mut miss_w) = (0.0, 0.0);
    let (mut nonconsecutive, mut undefined) = (0, 0);
    for u in 0..data.n_units() {
        let cells = data.unit_cells(u);
        let end = cells.end - 1;
        let t = data.cell_period(end);
        if split.first_test_period[u] > t || cells.len() < 2 {
            continue;
        }
        let prev = end - 1;
        if data.cell_period(prev) + 1 != t {
            nonconsecutive += 1;
            continue;
        }
        let yhat = match predict_cell(params, gamma, data, end) {
            Ok(v) => v,
            Err(Error::UndefinedAlpha { .. }) => {
                undefined += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let z = data.poverty_line(end);
        let from = poverty_status(data.outcome(prev), data.poverty_line(prev));
        let to = poverty_status(data.outcome(end), z);
        let to_hat = poverty_status(yhat, z);
        let w = data.weight(end);
        let end_period = data.period_ids()[t];
        actual.push(TransitionPair { end_period, from, to, weight: w });
        predicted.push(TransitionPair { end_period, from, to: to_hat, weight: w });
        if to == to_hat {
            hit_w += w;
        } else {
            miss_w += w;
        }
    }
    let total = hit_w + miss_w;
    let (accuracy, misclassification) = if total > 0.0 {
        (hit_w / total, miss_w / total)
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(OneStepValidation {
        n_pairs: actual.len(),
        actual: transition_table(&actual),
        predicted: transition_table(&predicted),
        accuracy,
        misclassification,
        excluded_nonconsecutive: nonconsecutive,
        excluded_undefined: undefined,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationCell {
    pub accuracy: f64,
    pub n: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutClassification {
    /// Keyed by period id.
    pub by_period: BTreeMap<i64, ClassificationCell>,
    pub overall: ClassificationCell,
    pub excluded_undefined: usize,
}

/// Weighted poverty classification accuracy over every held-out cell,
/// per period and overall.
pub fn holdout_classification(
    params: &ModelParams,
    gamma: &GroupAssignment,
    data: &PanelDataset,
    split: &HoldoutSplit,
) -> Result<HoldoutClassification> {
    let mut acc: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    let mut excluded = 0;
    for &c in &split.test_cells {
        let yhat = match predict_cell(params, gamma, data, c) {
            Ok(v) => v,
            Err(Error::UndefinedAlpha { .. }) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let z = data.poverty_line(c);
        let w = data.weight(c);
        let e = acc.entry(data.period_ids()[data.cell_period(c)]).or_default();
        if poverty_status(yhat, z) == poverty_status(data.outcome(c), z) {
            e.0 += w;
        }
        e.1 += w;
        e.2 += 1;
    }
    let cell = |hit: f64, w: f64, n: usize| ClassificationCell {
        accuracy: if w > 0.0 { hit / w } else { f64::NAN },
        n,
        weight: w,
    };
    let (hit, w, n) = acc
        .values()
        .fold((0.0, 0.0, 0), |a, v| (a.0 + v.0, a.1 + v.1, a.2 + v.2));
    Ok(HoldoutClassification {
        by_period: acc.iter().map(|(&t, v)| (t, cell(v.0, v.1, v.2))).collect(),
        overall: cell(hit, w, n),
        excluded_undefined: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodFit {
    pub mae: f64,
    pub rmse: f64,
    pub tv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionFitMetrics {
    pub by_period: BTreeMap<i64, PeriodFit>,
    pub mae_avg: f64,
    pub rmse_avg: f64,
    pub tv_avg: f64,
    pub tv_max: f64,
}

/// Share-vector distances between two tables over their common end periods.
pub fn transition_fit(predicted: &TransitionTable, actual: &TransitionTable) -> Result<TransitionFitMetrics> {
    let mut by_period = BTreeMap::new();
    for (t, p) in &predicted.rows {
        let Some(a) = actual.rows.get(t) else { continue };
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        for s in 0..4 {
            let d = p.shares[s] - a.shares[s];
            abs_sum += d.abs();
            sq_sum += d * d;
        }
        by_period.insert(
            *t,
            PeriodFit {
                mae: abs_sum / 4.0,
                rmse: (sq_sum / 4.0).sqrt(),
                tv: abs_sum / 2.0,
            },
        );
    }
    if by_period.is_empty() {
        return Err(Error::NoOverlap);
    }
    let n = by_period.len() as f64;
    let avg = |f: fn(&PeriodFit) -> f64| by_period.values().map(f).sum::<f64>() / n;
    Ok(TransitionFitMetrics {
        mae_avg: avg(|p| p.mae),
        rmse_avg: avg(|p| p.rmse),
        tv_avg: avg(|p| p.tv),
        tv_max: by_period.values().map(|p| p.tv).fold(0.0, f64::max),
        by_period,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile {
    /// Zero-based label in the fit.
    pub group: usize,
    pub size: usize,
    pub population_share: f64,
    pub mean_alpha: Option<f64>,
    /// Weighted mean outcome in each member's first observed period.
    pub baseline_outcome: Option<f64>,
    /// Weighted means of the requested covariates in each member's first
    /// observed period, in request order.
    pub baseline_covariates: Vec<Option<f64>>,
}

/// Per-group size, weighted population share and baseline means, ordered
/// from the highest to the lowest mean group effect (groups without any
/// defined effect last). Baseline values and weights come from each unit's
/// first observed period.
pub fn group_profiles(
    params: &ModelParams,
    gamma: &GroupAssignment,
    data: &PanelDataset,
    baseline_covariates: &[usize],
) -> Vec<GroupProfile> {
    let g = gamma.n_groups();
    let k = baseline_covariates.len();
    let mut size = vec![0usize; g];
    let mut wsum = vec![0.0; g];
    let mut ysum = vec![0.0; g];
    let mut xsum = vec![vec![0.0; k]; g];
    for u in 0..data.n_units() {
        let c = data.cell(data.unit_cells(u).start);
        let grp = gamma.group_of(u);
        size[grp] += 1;
        wsum[grp] += c.weight;
        ysum[grp] += c.weight * c.outcome;
        for (j, &col) in baseline_covariates.iter().enumerate() {
            xsum[grp][j] += c.weight * c.covariates[col];
        }
    }
    let total: f64 = wsum.iter().sum();
    let mean = |s: f64, w: f64| (w > 0.0).then(|| s / w);
    let mut out: Vec<GroupProfile> = (0..g)
        .map(|grp| GroupProfile {
            group: grp,
            size: size[grp],
            population_share: if total > 0.0 { wsum[grp] / total } else { 0.0 },
            mean_alpha: params.alpha.mean_defined(grp),
            baseline_outcome: mean(ysum[grp], wsum[grp]),
            baseline_covariates: xsum[grp].iter().map(|&s| mean(s, wsum[grp])).collect(),
        })
        .collect();
    out.sort_by(|a, b| match (a.mean_alpha, b.mean_alpha) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.group.cmp(&b.group)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.group.cmp(&b.group),
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationSummary {
    /// Poor periods over periods with a status.
    pub poor_share: f64,
    pub chronic: bool,
    /// Lengths of maximal runs of poor periods; a missing status ends a run.
    pub spells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationReport {
    pub units: Vec<DurationSummary>,
    /// Spell length to number of spells.
    pub spell_lengths: BTreeMap<usize, usize>,
}

/// Time in poverty, chronic poverty (poor in at least `chronic_min`
/// periods) and spell lengths, from per-unit status series over a window.
pub fn duration_summaries(statuses: &[Vec<Option<PovertyStatus>>], chronic_min: usize) -> DurationReport {
    let mut units = Vec::with_capacity(statuses.len());
    let mut spell_lengths = BTreeMap::new();
    for series in statuses {
        let mut poor = 0usize;
        let mut known = 0usize;
        let mut spells = Vec::new();
        let mut run = 0usize;
        for s in series {
            match s {
                Some(PovertyStatus::Poor) => {
                    poor += 1;
                    known += 1;
                    run += 1;
                }
                other => {
                    if other.is_some() {
                        known += 1;
                    }
                    if run > 0 {
                        spells.push(run);
                        run = 0;
                    }
                }
            }
        }
        if run > 0 {
            spells.push(run);
        }
        for &l in &spells {
            *spell_lengths.entry(l).or_insert(0) += 1;
        }
        units.push(DurationSummary {
            poor_share: if known > 0 { poor as f64 / known as f64 } else { f64::NAN },
            chronic: poor >= chronic_min,
            spells,
        });
    }
    DurationReport { units, spell_lengths }
}
