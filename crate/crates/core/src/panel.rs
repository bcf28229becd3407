//! Data model for unbalanced rotating panels and the masked least-squares
//! objective.
//!
//! A [`PanelDataset`] only stores observed cells, i.e. the `(unit, period)`
//! pairs where the outcome and every covariate are present. Everything that
//! sums over the panel therefore sums over the observed set by construction.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, Rule, ValidationReport, Violation};

/// One row of a long-format panel before validation. `None` marks a missing
/// value.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub unit: String,
    pub period: i64,
    pub location: String,
    pub outcome: Option<f64>,
    pub covariates: Vec<Option<f64>>,
    pub weight: Option<f64>,
    pub poverty_line: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawPanel {
    pub covariate_names: Vec<String>,
    pub records: Vec<RawRecord>,
}

impl RawPanel {
    pub fn new(covariate_names: Vec<String>) -> Self {
        Self {
            covariate_names,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: RawRecord) {
        self.records.push(record);
    }
}

/// Borrowed view of one observed cell.
#[derive(Debug, Clone, Copy)]
pub struct Cell<'a> {
    pub unit: usize,
    pub period: usize,
    pub outcome: f64,
    pub covariates: &'a [f64],
    pub weight: f64,
    pub poverty_line: f64,
}

/// Validated, immutable unbalanced panel.
///
/// Units keep their first-appearance order, periods are sorted ascending and
/// locations are sorted by label (numerically when every label is an integer).
/// Observed cells are stored sorted by `(unit, period)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    unit_ids: Vec<String>,
    period_ids: Vec<i64>,
    location_ids: Vec<String>,
    unit_location: Vec<usize>,
    covariate_names: Vec<String>,
    cell_unit: Vec<usize>,
    cell_period: Vec<usize>,
    outcome: Vec<f64>,
    covariates: Vec<f64>,
    weight: Vec<f64>,
    poverty_line: Vec<f64>,
    unit_offsets: Vec<usize>,
}

fn label_order(a: &str, b: &str) -> Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => Ordering::Less,
        (Err(_), Ok(_)) => Ordering::Greater,
        (Err(_), Err(_)) => a.cmp(b),
    }
}

/// Checks every panel rule and builds the dataset, or reports every
/// violation found.
pub fn validate_dataset(raw: &RawPanel) -> Result<PanelDataset> {
    let k = raw.covariate_names.len();
    let mut report = ValidationReport::default();

    let mut unit_index: HashMap<&str, usize> = HashMap::new();
    let mut unit_ids: Vec<String> = Vec::new();
    for r in &raw.records {
        if !unit_index.contains_key(r.unit.as_str()) {
            unit_index.insert(r.unit.as_str(), unit_ids.len());
            unit_ids.push(r.unit.clone());
        }
    }
    let mut period_ids: Vec<i64> = raw.records.iter().map(|r| r.period).collect();
    period_ids.sort_unstable();
    period_ids.dedup();

    if unit_ids.is_empty() {
        report.empty_panel = true;
        return Err(Error::Validation(report));
    }

    // Observed rows grouped by unit, in record order.
    let mut observed: Vec<Vec<&RawRecord>> = vec![Vec::new(); unit_ids.len()];
    let mut seen: HashSet<(usize, i64)> = HashSet::new();
    for r in &raw.records {
        let u = unit_index[r.unit.as_str()];
        if !seen.insert((u, r.period)) {
            report.violations.push(Violation {
                unit: r.unit.clone(),
                period: Some(r.period),
                rule: Rule::DuplicateCell,
            });
            continue;
        }
        if r.covariates.len() != k {
            report.violations.push(Violation {
                unit: r.unit.clone(),
                period: Some(r.period),
                rule: Rule::CovariateArity {
                    expected: k,
                    found: r.covariates.len(),
                },
            });
            continue;
        }
        let Some(y) = r.outcome else { continue };
        if r.covariates.iter().any(Option::is_none) {
            continue;
        }
        let mut bad = |rule: Rule| {
            report.violations.push(Violation {
                unit: r.unit.clone(),
                period: Some(r.period),
                rule,
            });
        };
        let mut ok = true;
        if !y.is_finite() {
            bad(Rule::NonFinite { field: "outcome".into() });
            ok = false;
        }
        for (j, x) in r.covariates.iter().enumerate() {
            if !x.unwrap().is_finite() {
                let field = raw.covariate_names[j].clone();
                bad(Rule::NonFinite { field });
                ok = false;
            }
        }
        match r.weight {
            None => {
                bad(Rule::MissingValue { field: "weight".into() });
                ok = false;
            }
            Some(w) if !w.is_finite() => {
                bad(Rule::NonFinite { field: "weight".into() });
                ok = false;
            }
            Some(w) if w < 0.0 => {
                bad(Rule::NegativeWeight);
                ok = false;
            }
            Some(_) => {}
        }
        match r.poverty_line {
            None => {
                bad(Rule::MissingValue { field: "poverty_line".into() });
                ok = false;
            }
            Some(z) if !z.is_finite() => {
                bad(Rule::NonFinite { field: "poverty_line".into() });
                ok = false;
            }
            Some(_) => {}
        }
        if ok {
            observed[u].push(r);
        }
    }

    let mut location_labels: Vec<String> = Vec::new();
    for (u, rows) in observed.iter().enumerate() {
        if rows.is_empty() {
            report.violations.push(Violation {
                unit: unit_ids[u].clone(),
                period: None,
                rule: Rule::EmptyUnit,
            });
            continue;
        }
        let mut rows_sorted = rows.clone();
        rows_sorted.sort_by_key(|r| r.period);
        let first = &rows_sorted[0].location;
        for r in &rows_sorted[1..] {
            if &r.location != first {
                report.violations.push(Violation {
                    unit: unit_ids[u].clone(),
                    period: Some(r.period),
                    rule: Rule::LocationDrift {
                        first: first.clone(),
                        other: r.location.clone(),
                    },
                });
                break;
            }
        }
        location_labels.push(first.clone());
    }

    if !report.is_ok() {
        return Err(Error::Validation(report));
    }

    location_labels.sort_by(|a, b| label_order(a, b));
    location_labels.dedup();
    let loc_index: HashMap<&str, usize> = location_labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i))
        .collect();
    let period_index: HashMap<i64, usize> =
        period_ids.iter().enumerate().map(|(i, &p)| (p, i)).collect();

    let n_obs: usize = observed.iter().map(Vec::len).sum();
    let mut data = PanelDataset {
        unit_location: Vec::with_capacity(unit_ids.len()),
        unit_ids,
        period_ids,
        location_ids: Vec::new(),
        covariate_names: raw.covariate_names.clone(),
        cell_unit: Vec::with_capacity(n_obs),
        cell_period: Vec::with_capacity(n_obs),
        outcome: Vec::with_capacity(n_obs),
        covariates: Vec::with_capacity(n_obs * k),
        weight: Vec::with_capacity(n_obs),
        poverty_line: Vec::with_capacity(n_obs),
        unit_offsets: vec![0],
    };
    for (u, rows) in observed.iter_mut().enumerate() {
        rows.sort_by_key(|r| r.period);
        data.unit_location.push(loc_index[rows[0].location.as_str()]);
        for r in rows.iter() {
            data.cell_unit.push(u);
            data.cell_period.push(period_index[&r.period]);
            data.outcome.push(r.outcome.unwrap());
            data.covariates.extend(r.covariates.iter().map(|x| x.unwrap()));
            data.weight.push(r.weight.unwrap());
            data.poverty_line.push(r.poverty_line.unwrap());
        }
        data.unit_offsets.push(data.cell_unit.len());
    }
    data.location_ids = location_labels;
    Ok(data)
}

impl PanelDataset {
    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.period_ids.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_locations(&self) -> usize {
        self.location_ids.len()
    }

    /// Number of observed cells.
    pub fn n_obs(&self) -> usize {
        self.outcome.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn period_ids(&self) -> &[i64] {
        &self.period_ids
    }

    pub fn location_ids(&self) -> &[String] {
        &self.location_ids
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn unit_location(&self, unit: usize) -> usize {
        self.unit_location[unit]
    }

    pub fn period_index(&self, period_id: i64) -> Option<usize> {
        self.period_ids.binary_search(&period_id).ok()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Range of cell indices belonging to `unit`, in period order.
    pub fn unit_cells(&self, unit: usize) -> Range<usize> {
        self.unit_offsets[unit]..self.unit_offsets[unit + 1]
    }

    pub fn cell(&self, c: usize) -> Cell<'_> {
        let k = self.n_covariates();
        Cell {
            unit: self.cell_unit[c],
            period: self.cell_period[c],
            outcome: self.outcome[c],
            covariates: &self.covariates[c * k..(c + 1) * k],
            weight: self.weight[c],
            poverty_line: self.poverty_line[c],
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = Cell<'_>> + '_ {
        (0..self.n_obs()).map(move |c| self.cell(c))
    }

    pub fn cell_unit(&self, c: usize) -> usize {
        self.cell_unit[c]
    }

    pub fn cell_period(&self, c: usize) -> usize {
        self.cell_period[c]
    }

    pub fn outcome(&self, c: usize) -> f64 {
        self.outcome[c]
    }

    pub fn covariates(&self, c: usize) -> &[f64] {
        let k = self.n_covariates();
        &self.covariates[c * k..(c + 1) * k]
    }

    pub fn weight(&self, c: usize) -> f64 {
        self.weight[c]
    }

    pub fn poverty_line(&self, c: usize) -> f64 {
        self.poverty_line[c]
    }

    /// Cell index of `(unit, period)` if observed.
    pub fn find_cell(&self, unit: usize, period: usize) -> Option<usize> {
        let r = self.unit_cells(unit);
        self.cell_period[r.clone()]
            .binary_search(&period)
            .ok()
            .map(|off| r.start + off)
    }

    /// Observed-cell count per unit.
    pub fn unit_obs_count(&self, unit: usize) -> usize {
        self.unit_cells(unit).len()
    }

    /// Poverty line shared by every observed cell of each period, or `None`
    /// where the period has no cells or household-specific lines.
    pub fn period_poverty_lines(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<Option<f64>>> = vec![None; self.n_periods()];
        for c in 0..self.n_obs() {
            let t = self.cell_period[c];
            let z = self.poverty_line[c];
            out[t] = match out[t] {
                None => Some(Some(z)),
                Some(Some(prev)) if prev == z => Some(Some(z)),
                Some(_) => Some(None),
            };
        }
        out.into_iter().map(Option::flatten).collect()
    }

    /// Keeps the cells for which `keep(cell)` holds. Units, periods,
    /// locations and covariate names are carried over unchanged; a unit left
    /// with no cell is an `EmptyUnit` violation.
    pub fn restrict(&self, mut keep: impl FnMut(usize) -> bool) -> Result<PanelDataset> {
        let k = self.n_covariates();
        let mut out = PanelDataset {
            unit_ids: self.unit_ids.clone(),
            period_ids: self.period_ids.clone(),
            location_ids: self.location_ids.clone(),
            unit_location: self.unit_location.clone(),
            covariate_names: self.covariate_names.clone(),
            cell_unit: Vec::new(),
            cell_period: Vec::new(),
            outcome: Vec::new(),
            covariates: Vec::new(),
            weight: Vec::new(),
            poverty_line: Vec::new(),
            unit_offsets: vec![0],
        };
        let mut report = ValidationReport::default();
        for u in 0..self.n_units() {
            for c in self.unit_cells(u) {
                if keep(c) {
                    out.cell_unit.push(u);
                    out.cell_period.push(self.cell_period[c]);
                    out.outcome.push(self.outcome[c]);
                    out.covariates
                        .extend_from_slice(&self.covariates[c * k..(c + 1) * k]);
                    out.weight.push(self.weight[c]);
                    out.poverty_line.push(self.poverty_line[c]);
                }
            }
            if out.cell_unit.len() == *out.unit_offsets.last().unwrap() {
                report.violations.push(Violation {
                    unit: self.unit_ids[u].clone(),
                    period: None,
                    rule: Rule::EmptyUnit,
                });
            }
            out.unit_offsets.push(out.cell_unit.len());
        }
        if report.is_ok() {
            Ok(out)
        } else {
            Err(Error::Validation(report))
        }
    }

    /// Keeps the listed units (in the given order) with all their cells.
    pub fn select_units(&self, units: &[usize]) -> PanelDataset {
        let k = self.n_covariates();
        let mut out = PanelDataset {
            unit_ids: units.iter().map(|&u| self.unit_ids[u].clone()).collect(),
            period_ids: self.period_ids.clone(),
            location_ids: self.location_ids.clone(),
            unit_location: units.iter().map(|&u| self.unit_location[u]).collect(),
            covariate_names: self.covariate_names.clone(),
            cell_unit: Vec::new(),
            cell_period: Vec::new(),
            outcome: Vec::new(),
            covariates: Vec::new(),
            weight: Vec::new(),
            poverty_line: Vec::new(),
            unit_offsets: vec![0],
        };
        for (new_u, &u) in units.iter().enumerate() {
            for c in self.unit_cells(u) {
                out.cell_unit.push(new_u);
                out.cell_period.push(self.cell_period[c]);
                out.outcome.push(self.outcome[c]);
                out.covariates
                    .extend_from_slice(&self.covariates[c * k..(c + 1) * k]);
                out.weight.push(self.weight[c]);
                out.poverty_line.push(self.poverty_line[c]);
            }
            out.unit_offsets.push(out.cell_unit.len());
        }
        out
    }

    /// Long-format records of the observed cells; `validate_dataset` on the
    /// result rebuilds an equal dataset.
    pub fn to_raw(&self) -> RawPanel {
        let mut raw = RawPanel::new(self.covariate_names.clone());
        for c in self.cells() {
            raw.push(RawRecord {
                unit: self.unit_ids[c.unit].clone(),
                period: self.period_ids[c.period],
                location: self.location_ids[self.unit_location[c.unit]].clone(),
                outcome: Some(c.outcome),
                covariates: c.covariates.iter().map(|&x| Some(x)).collect(),
                weight: Some(c.weight),
                poverty_line: Some(c.poverty_line),
            });
        }
        raw
    }
}

/// Group-by-period intercepts. A cell is `None` when its group had no
/// observed member in that period at the last update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GroupTimeEffects(Vec<Vec<Option<f64>>>);

impl GroupTimeEffects {
    pub fn undefined(n_groups: usize, n_periods: usize) -> Self {
        Self(vec![vec![None; n_periods]; n_groups])
    }

    pub fn from_rows(rows: Vec<Vec<Option<f64>>>) -> Self {
        Self(rows)
    }

    pub fn n_groups(&self) -> usize {
        self.0.len()
    }

    pub fn n_periods(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn get(&self, group: usize, period: usize) -> Option<f64> {
        self.0[group][period]
    }

    pub fn set(&mut self, group: usize, period: usize, value: Option<f64>) {
        self.0[group][period] = value;
    }

    pub fn row(&self, group: usize) -> &[Option<f64>] {
        &self.0[group]
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.0
    }

    /// Mean of the defined entries of a group's path.
    pub fn mean_defined(&self, group: usize) -> Option<f64> {
        let vals: Vec<f64> = self.0[group].iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }

    /// Periods (by index) with at least one defined group effect.
    pub fn n_supported_periods(&self) -> usize {
        (0..self.n_periods())
            .filter(|&t| self.0.iter().any(|row| row[t].is_some()))
            .count()
    }
}

/// Common slopes, group-time effects and location effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub theta: Vec<f64>,
    pub alpha: GroupTimeEffects,
    /// Location effects; `mu[reference_location]` is exactly zero.
    pub mu: Vec<f64>,
    pub reference_location: usize,
}

impl ModelParams {
    pub fn n_groups(&self) -> usize {
        self.alpha.n_groups()
    }

    /// `x·θ + μ_p`: the part of the prediction that does not depend on the group.
    #[inline]
    pub fn offset(&self, covariates: &[f64], location: usize) -> f64 {
        let xb: f64 = covariates.iter().zip(&self.theta).map(|(x, b)| x * b).sum();
        xb + self.mu[location]
    }
}

/// Partition of units into at most `n_groups` groups. Labels are 0-based
/// internally; file formats print them 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    n_groups: usize,
}

impl GroupAssignment {
    pub fn new(labels: Vec<usize>, n_groups: usize) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::InvalidConfig("number of groups must be >= 1".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&g| g >= n_groups) {
            return Err(Error::InvalidConfig(format!(
                "group label {bad} out of range for {n_groups} groups"
            )));
        }
        Ok(Self { labels, n_groups })
    }

    pub fn constant(n_units: usize, n_groups: usize) -> Self {
        Self {
            labels: vec![0; n_units],
            n_groups: n_groups.max(1),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    #[inline]
    pub fn group_of(&self, unit: usize) -> usize {
        self.labels[unit]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Moves a unit. Panics if `group` is out of range.
    #[inline]
    pub fn set(&mut self, unit: usize, group: usize) {
        assert!(group < self.n_groups, "group {group} out of range");
        self.labels[unit] = group;
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_groups];
        for &g in &self.labels {
            sizes[g] += 1;
        }
        sizes
    }
}

/// Tuning of the grouped fixed effects search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub n_groups: usize,
    pub n_starts: usize,
    /// VNS cycles per start.
    pub itermax: usize,
    /// Largest shake size.
    pub neighmax: usize,
    /// Cap on greedy reassignment sweeps inside each refinement.
    pub max_local_iters: usize,
    pub base_seed: u64,
    /// Relative SSE tolerance used to call two starts tied and to absorb
    /// rounding in descent checks.
    pub sse_rel_tol: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_groups: 1,
            n_starts: 3,
            itermax: 10,
            neighmax: 5,
            max_local_iters: 2,
            base_seed: 0,
            sse_rel_tol: 1e-10,
        }
    }
}

impl FitConfig {
    pub fn with_groups(n_groups: usize) -> Self {
        Self {
            n_groups,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counters = [
            ("n_groups", self.n_groups),
            ("n_starts", self.n_starts),
            ("itermax", self.itermax),
            ("neighmax", self.neighmax),
            ("max_local_iters", self.max_local_iters),
        ];
        for (name, v) in counters {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if !(self.sse_rel_tol.is_finite() && self.sse_rel_tol > 0.0) {
            return Err(Error::InvalidConfig("sse_rel_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Residual of one observed cell, or `UndefinedAlpha`.
#[inline]
pub(crate) fn cell_residual(
    data: &PanelDataset,
    params: &ModelParams,
    gamma: &GroupAssignment,
    c: usize,
) -> Result<f64> {
    let cell = data.cell(c);
    let g = gamma.group_of(cell.unit);
    let a = params
        .alpha
        .get(g, cell.period)
        .ok_or_else(|| Error::UndefinedAlpha {
            unit: data.unit_ids()[cell.unit].clone(),
            group: g + 1,
            period: data.period_ids()[cell.period],
        })?;
    Ok(cell.outcome - params.offset(cell.covariates, data.unit_location(cell.unit)) - a)
}

/// Unweighted sum of squared residuals over the observed cells.
pub fn objective(data: &PanelDataset, params: &ModelParams, gamma: &GroupAssignment) -> Result<f64> {
    let mut sse = 0.0;
    for c in 0..data.n_obs() {
        let r = cell_residual(data, params, gamma, c)?;
        sse += r * r;
    }
    Ok(sse)
}
