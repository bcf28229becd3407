//! Training/test splits, BIC, holdout RMSE and the two-phase search over the
//! number of groups.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::error::{Error, Result};
use crate::ols::DesignSpec;
use crate::panel::{FitConfig, GroupAssignment, ModelParams, PanelDataset};
use crate::search::{multi_start_fit, FitResult};

/// Each unit's last `n_test_periods` observed periods are held out.
#[derive(Debug, Clone, PartialEq)]
pub struct HoldoutSplit {
    /// Training panel; same units, periods and locations as the source, so
    /// unit and period indices carry over.
    pub train: PanelDataset,
    /// Held-out cell indices into the source panel, grouped by unit and in
    /// period order within a unit.
    pub test_cells: Vec<usize>,
    /// First held-out period index of each unit.
    pub first_test_period: Vec<usize>,
    pub n_test_periods: usize,
}

impl HoldoutSplit {
    /// Last observed period index of each unit (the single test period when
    /// one period is held out).
    pub fn last_period(&self, source: &PanelDataset) -> Vec<usize> {
        (0..source.n_units())
            .map(|u| source.cell_period(source.unit_cells(u).end - 1))
            .collect()
    }
}

/// Holds out every unit's last observed period.
pub fn last_year_holdout(data: &PanelDataset) -> Result<HoldoutSplit> {
    last_years_holdout(data, 1)
}

/// Holds out every unit's last `k` observed periods; each unit needs at least
/// `k + 1` observed periods.
pub fn last_years_holdout(data: &PanelDataset, k: usize) -> Result<HoldoutSplit> {
    if k == 0 {
        return Err(Error::InvalidConfig("at least one period must be held out".into()));
    }
    let short: Vec<String> = (0..data.n_units())
        .filter(|&u| data.unit_obs_count(u) <= k)
        .map(|u| data.unit_ids()[u].clone())
        .collect();
    if !short.is_empty() {
        return Err(Error::UnitObservedOnce { units: short });
    }
    let mut is_test = vec![false; data.n_obs()];
    let mut test_cells = Vec::with_capacity(data.n_units() * k);
    let mut first_test_period = Vec::with_capacity(data.n_units());
    for u in 0..data.n_units() {
        let r = data.unit_cells(u);
        let start = r.end - k;
        first_test_period.push(data.cell_period(start));
        for c in start..r.end {
            is_test[c] = true;
            test_cells.push(c);
        }
    }
    let train = data.restrict(|c| !is_test[c])?;
    Ok(HoldoutSplit {
        train,
        test_cells,
        first_test_period,
        n_test_periods: k,
    })
}

/// Components of the information criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BicReport {
    pub sse: f64,
    pub n_obs: usize,
    pub n_params: usize,
    /// Periods with at least one defined group effect.
    pub n_periods_effective: usize,
    pub sigma2: f64,
    pub bic: f64,
}

/// `SSE/NT + sigma2 * (p/NT) * ln NT` with `sigma2 = SSE/(NT - p)`.
pub fn bic_value(sse: f64, n_obs: usize, n_params: usize) -> Result<f64> {
    if n_obs <= n_params {
        return Err(Error::DegreesOfFreedomExhausted { n_obs, n_params });
    }
    let nt = n_obs as f64;
    let sigma2 = sse / (n_obs - n_params) as f64;
    Ok(sse / nt + sigma2 * (n_params as f64 / nt) * nt.ln())
}

/// `G * T + N + K + L`, where `T` counts periods with a defined effect.
pub fn parameter_count(params: &ModelParams, data: &PanelDataset) -> usize {
    params.n_groups() * params.alpha.n_supported_periods()
        + data.n_units()
        + data.n_covariates()
        + data.n_locations()
}

/// BIC of a fit evaluated on the panel it was estimated on.
pub fn bic(params: &ModelParams, gamma: &GroupAssignment, train: &PanelDataset) -> Result<BicReport> {
    let sse = crate::panel::objective(train, params, gamma)?;
    let n_obs = train.n_obs();
    let n_params = parameter_count(params, train);
    let value = bic_value(sse, n_obs, n_params)?;
    Ok(BicReport {
        sse,
        n_obs,
        n_params,
        n_periods_effective: params.alpha.n_supported_periods(),
        sigma2: sse / (n_obs - n_params) as f64,
        bic: value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldoutScore {
    pub rmse: f64,
    pub scored: usize,
    /// Test cells dropped because the unit's group has no effect there.
    pub excluded: usize,
}

/// Root-mean-square prediction error over the held-out cells of `source`.
pub fn holdout_rmse(
    params: &ModelParams,
    gamma: &GroupAssignment,
    source: &PanelDataset,
    split: &HoldoutSplit,
) -> Result<HoldoutScore> {
    let mut ss = 0.0;
    let mut scored = 0;
    let mut excluded = 0;
    for &c in &split.test_cells {
        let cell = source.cell(c);
        match params.alpha.get(gamma.group_of(cell.unit), cell.period) {
            Some(a) => {
                let yhat = params.offset(cell.covariates, source.unit_location(cell.unit)) + a;
                ss += (cell.outcome - yhat).powi(2);
                scored += 1;
            }
            None => excluded += 1,
        }
    }
    if scored == 0 {
        return Err(Error::NoScorableCells { excluded });
    }
    Ok(HoldoutScore {
        rmse: (ss / scored as f64).sqrt(),
        scored,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub g: usize,
    pub phase: Phase,
    pub sse_train: f64,
    pub bic: f64,
    pub rmse_test: f64,
    pub n_starts_used: usize,
    pub excluded_cells: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Coarse rows for the whole grid, then fine rows for the shortlist,
    /// each in ascending `g`.
    pub rows: Vec<SelectionRow>,
    pub shortlist: Vec<usize>,
    pub chosen_g: usize,
}

fn evaluate(
    source: &PanelDataset,
    split: &HoldoutSplit,
    g: usize,
    base: &FitConfig,
    phase: Phase,
    spec_template: &DesignSpec,
) -> Result<(SelectionRow, FitResult)> {
    let config = FitConfig {
        n_groups: g,
        ..base.clone()
    };
    let spec = DesignSpec {
        n_groups: g,
        ..*spec_template
    };
    let fit = multi_start_fit(&split.train, &spec, &config)?;
    let b = bic(&fit.params, &fit.gamma, &split.train)?;
    let score = holdout_rmse(&fit.params, &fit.gamma, source, split)?;
    info!(g, ?phase, sse = fit.sse, bic = b.bic, rmse = score.rmse, "grid point");
    Ok((
        SelectionRow {
            g,
            phase,
            sse_train: fit.sse,
            bic: b.bic,
            rmse_test: score.rmse,
            n_starts_used: config.n_starts,
            excluded_cells: score.excluded,
        },
        fit,
    ))
}

/// Lowest-RMSE grid values; ties keep the smaller `g`.
fn rank_by_rmse(rows: &[SelectionRow]) -> Vec<usize> {
    let mut order: Vec<&SelectionRow> = rows.iter().collect();
    order.sort_by(|a, b| a.rmse_test.total_cmp(&b.rmse_test).then(a.g.cmp(&b.g)));
    order.into_iter().map(|r| r.g).collect()
}

/// Two-phase selection of the number of groups on the last-observed-period
/// holdout: every grid value is fitted with `coarse`, the `shortlist_size`
/// best by test RMSE are refitted with `fine`, and the fine row with the
/// smallest RMSE wins (ties to the smaller `g`). The `n_groups` fields of the
/// configs are ignored.
pub fn select_g(
    data: &PanelDataset,
    grid: &[usize],
    coarse: &FitConfig,
    fine: &FitConfig,
    shortlist_size: usize,
    spec_template: &DesignSpec,
) -> Result<Selection> {
    let mut grid: Vec<usize> = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() || grid[0] == 0 {
        return Err(Error::InvalidConfig("grid must hold positive group counts".into()));
    }
    if shortlist_size == 0 {
        return Err(Error::InvalidConfig("shortlist_size must be >= 1".into()));
    }
    let split = last_year_holdout(data)?;
    let mut rows = grid
        .par_iter()
        .map(|&g| evaluate(data, &split, g, coarse, Phase::Coarse, spec_template).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let mut shortlist: Vec<usize> = rank_by_rmse(&rows).into_iter().take(shortlist_size).collect();
    shortlist.sort_unstable();
    let fine_rows = shortlist
        .par_iter()
        .map(|&g| evaluate(data, &split, g, fine, Phase::Fine, spec_template).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    let chosen_g = rank_by_rmse(&fine_rows)[0];
    rows.extend(fine_rows);
    Ok(Selection {
        rows,
        shortlist,
        chosen_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::test_support::{panel, rec};
    use crate::panel::GroupTimeEffects;
    use proptest::prelude::*;

    fn five_units() -> PanelDataset {
        panel(
            0,
            vec![
                rec("a", 2007, "1", 1.0, &[]),
                rec("a", 2009, "1", 1.5, &[]),
                rec("a", 2012, "1", 2.0, &[]),
                rec("b", 2008, "1", 0.5, &[]),
                rec("b", 2009, "1", 0.7, &[]),
                rec("c", 2007, "1", 3.0, &[]),
                rec("c", 2008, "1", 3.1, &[]),
            ],
        )
    }

    #[test]
    fn last_year_split_by_unit() {
        let d = five_units();
        let s = last_year_holdout(&d).unwrap();
        let test: Vec<(usize, i64)> = s
            .test_cells
            .iter()
            .map(|&c| (d.cell_unit(c), d.period_ids()[d.cell_period(c)]))
            .collect();
        assert_eq!(test, vec![(0, 2012), (1, 2009), (2, 2008)]);
        assert_eq!(s.train.n_obs(), 4);
        // 2012 has no training cell
        let p2012 = d.period_index(2012).unwrap();
        assert!(s.train.cells().all(|c| c.period != p2012));
    }

    #[test]
    fn unit_observed_once_rejected() {
        let d = panel(
            0,
            vec![
                rec("a", 1, "1", 1.0, &[]),
                rec("a", 2, "1", 1.0, &[]),
                rec("solo", 2, "1", 1.0, &[]),
            ],
        );
        match last_year_holdout(&d) {
            Err(Error::UnitObservedOnce { units }) => assert_eq!(units, vec!["solo".to_string()]),
            other => panic!("{other:?}"),
        }
        assert!(last_years_holdout(&d, 0).is_err());
    }

    #[test]
    fn two_year_holdout_needs_three_periods() {
        let d = five_units();
        let err = last_years_holdout(&d, 2).unwrap_err();
        assert!(matches!(err, Error::UnitObservedOnce { units } if units == vec!["b", "c"]));
        let only_a = d.select_units(&[0]);
        let s = last_years_holdout(&only_a, 2).unwrap();
        assert_eq!(s.test_cells, vec![1, 2]);
        assert_eq!(s.train.n_obs(), 1);
    }

    #[test]
    fn bic_hand_values() {
        assert_eq!(bic_value(0.0, 500, 153).unwrap(), 0.0);
        let want = 50.0 / 500.0 + (50.0 / 347.0) * (153.0 / 500.0) * 500f64.ln();
        assert!((bic_value(50.0, 500, 153).unwrap() - want).abs() < 1e-12);
        assert!(matches!(
            bic_value(1.0, 153, 153),
            Err(Error::DegreesOfFreedomExhausted { n_obs: 153, n_params: 153 })
        ));
    }

    #[test]
    fn parameter_count_skips_unsupported_periods() {
        let d = five_units();
        let mut alpha = GroupTimeEffects::undefined(2, d.n_periods());
        alpha.set(0, 0, Some(1.0));
        alpha.set(1, 2, Some(1.0));
        let p = ModelParams {
            theta: vec![],
            alpha,
            mu: vec![0.0],
            reference_location: 0,
        };
        // 2 groups x 2 supported periods + 3 units + 0 covariates + 1 location
        assert_eq!(parameter_count(&p, &d), 8);
    }

    fn flat_params(d: &PanelDataset, values: &[Option<f64>]) -> ModelParams {
        ModelParams {
            theta: vec![],
            alpha: GroupTimeEffects::from_rows(vec![values.to_vec()]),
            mu: vec![0.0; d.n_locations()],
            reference_location: 0,
        }
    }

    #[test]
    fn rmse_examples() {
        let d = five_units();
        let s = last_year_holdout(&d).unwrap();
        let gamma = GroupAssignment::constant(3, 1);
        // periods 2007, 2008, 2009, 2012; test outcomes: a@2012=2.0, b@2009=0.7, c@2008=3.1
        let perfect = flat_params(&d, &[None, None, Some(0.7), Some(2.0)]);
        // c@2008 has no effect: excluded
        let sc = holdout_rmse(&perfect, &gamma, &d, &s).unwrap();
        assert_eq!((sc.rmse, sc.scored, sc.excluded), (0.0, 2, 1));
        let two = flat_params(&d, &[None, None, Some(0.4), Some(2.4)]);
        let sc = holdout_rmse(&two, &gamma, &d, &s).unwrap();
        assert!((sc.rmse - (0.25f64 / 2.0).sqrt()).abs() < 1e-12);
        let none = flat_params(&d, &[Some(0.0), None, None, None]);
        assert!(matches!(
            holdout_rmse(&none, &gamma, &d, &s),
            Err(Error::NoScorableCells { excluded: 3 })
        ));
    }

    #[test]
    fn tiny_training_panel_exhausts_degrees_of_freedom() {
        let d = five_units().select_units(&[0, 1, 2]);
        let d = d.restrict(|_| true).unwrap();
        let cfg = FitConfig::with_groups(1);
        let spec = DesignSpec::new(1);
        // three training cells against 1*T_eff + 3 + 0 + 1 parameters: no dof
        assert!(matches!(
            select_g(&d, &[1], &cfg, &cfg, 6, &spec),
            Err(Error::DegreesOfFreedomExhausted { .. })
        ));
    }

    proptest! {
        #[test]
        fn bic_increases_in_parameter_count(sse in 0.1f64..1e4, nt in 10usize..5000, p_frac in 0.0f64..0.9) {
            let p = ((nt as f64) * p_frac) as usize;
            prop_assume!(p + 1 < nt);
            prop_assert!(bic_value(sse, nt, p + 1).unwrap() > bic_value(sse, nt, p).unwrap());
        }
    }
}
