//! Synthetic rotating panels with known latent groups.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{
    validate_dataset, GroupAssignment, GroupTimeEffects, ModelParams, PanelDataset, RawPanel,
    RawRecord,
};

/// Mask redraws allowed per unit before giving up.
pub const MAX_MASK_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rotation {
    /// Each unit is observed for `len` consecutive periods starting at a
    /// uniformly drawn period.
    Window { len: usize },
    /// Each period is observed independently with probability `p`.
    RandomMask { p: f64 },
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateLaw {
    StandardNormal,
    /// `values[unit][period][k]`.
    Supplied { values: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLaw {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub n_units: usize,
    pub n_periods: usize,
    pub theta: Vec<f64>,
    /// `n_groups × n_periods`.
    pub alpha: Vec<Vec<f64>>,
    /// One entry per location; the first is the reference and must be 0.
    pub mu: Vec<f64>,
    pub noise_sd: f64,
    pub rotation: Rotation,
    pub group_weights: Vec<f64>,
    pub covariates: CovariateLaw,
    pub weights: WeightLaw,
    /// One line per period.
    pub poverty_lines: Vec<f64>,
    pub first_period: i64,
    pub seed: u64,
}

/// Known truth behind a generated panel, indexed like the dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub gamma: GroupAssignment,
    pub params: ModelParams,
}

impl DgpSpec {
    /// A well-separated design: group paths share a common shape and sit
    /// `separation * noise_sd` apart, slopes alternate in sign, locations
    /// step by 0.2. Window rotation of length `window`, unit weights, poverty
    /// line 0 in every period.
    #[allow(clippy::too_many_arguments)]
    pub fn separated(
        n_units: usize,
        n_periods: usize,
        n_groups: usize,
        n_covariates: usize,
        n_locations: usize,
        noise_sd: f64,
        separation: f64,
        window: usize,
        seed: u64,
    ) -> Self {
        let gap = separation * if noise_sd > 0.0 { noise_sd } else { 1.0 };
        let alpha = (0..n_groups)
            .map(|g| {
                (0..n_periods)
                    .map(|t| gap * g as f64 + 0.5 * (0.7 * t as f64).sin() + 0.05 * t as f64)
                    .collect()
            })
            .collect();
        let theta = (0..n_covariates)
            .map(|k| if k % 2 == 0 { 1.0 } else { -0.5 } / (1.0 + k as f64 / 2.0))
            .collect();
        let mu = (0..n_locations)
            .map(|l| if l == 0 { 0.0 } else { 0.2 * l as f64 * if l % 2 == 0 { 1.0 } else { -1.0 } })
            .collect();
        let rotation = if window >= n_periods {
            Rotation::Full
        } else {
            Rotation::Window { len: window }
        };
        Self {
            n_units,
            n_periods,
            theta,
            alpha,
            mu,
            noise_sd,
            rotation,
            group_weights: vec![1.0 / n_groups as f64; n_groups],
            covariates: CovariateLaw::StandardNormal,
            weights: WeightLaw::Constant { value: 1.0 },
            poverty_lines: vec![0.0; n_periods],
            first_period: 1,
            seed,
        }
    }

    pub fn n_groups(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_units == 0 || self.n_periods < 2 {
            return bad("need at least one unit and two periods");
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|r| r.len() != self.n_periods) {
            return bad("alpha must be n_groups x n_periods");
        }
        if self.group_weights.len() != self.alpha.len()
            || self.group_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
            || self.group_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("group_weights must be nonnegative, one per group, with positive sum");
        }
        if self.mu.is_empty() || self.mu[0] != 0.0 {
            return bad("mu needs at least one location and a zero reference entry");
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return bad("noise_sd must be finite and nonnegative");
        }
        if self.poverty_lines.len() != self.n_periods {
            return bad("one poverty line per period");
        }
        match self.rotation {
            Rotation::Window { len } if len < 2 || len > self.n_periods => {
                return bad("window length must be in 2..=n_periods");
            }
            Rotation::RandomMask { p } if !(p > 0.0 && p <= 1.0) => {
                return bad("mask probability must be in (0, 1]");
            }
            _ => {}
        }
        if let CovariateLaw::Supplied { values } = &self.covariates {
            let k = self.theta.len();
            let ok = values.len() == self.n_units
                && values
                    .iter()
                    .all(|u| u.len() == self.n_periods && u.iter().all(|x| x.len() == k));
            if !ok {
                return bad("supplied covariates must be n_units x n_periods x K");
            }
        }
        match self.weights {
            WeightLaw::Constant { value } if !(value.is_finite() && value > 0.0) => {
                return bad("constant weight must be positive");
            }
            WeightLaw::Uniform { low, high } if !(low > 0.0 && high > low && high.is_finite()) => {
                return bad("uniform weights need 0 < low < high");
            }
            _ => {}
        }
        Ok(())
    }
}

fn draw_mask(spec: &DgpSpec, unit: usize, rng: &mut ChaCha8Rng) -> Result<Vec<bool>> {
    let t = spec.n_periods;
    match spec.rotation {
        Rotation::Full => Ok(vec![true; t]),
        Rotation::Window { len } => {
            let start = rng.random_range(0..=t - len);
            Ok((0..t).map(|s| s >= start && s < start + len).collect())
        }
        Rotation::RandomMask { p } => {
            for _ in 0..MAX_MASK_ATTEMPTS {
                let mask: Vec<bool> = (0..t).map(|_| rng.random_bool(p)).collect();
                if mask.iter().filter(|&&m| m).count() >= 2 {
                    return Ok(mask);
                }
            }
            Err(Error::InfeasibleRotation {
                unit,
                attempts: MAX_MASK_ATTEMPTS,
            })
        }
    }
}

/// Draws a panel and returns it with the generating truth.
///
/// Unobserved periods are emitted as rows without outcome, so every period
/// appears in the dataset even when no unit is observed in it.
pub fn generate(spec: &DgpSpec) -> Result<(PanelDataset, Truth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.theta.len();
    let n_loc = spec.mu.len();
    let groups = WeightedIndex::new(&spec.group_weights)
        .map_err(|e| Error::InvalidConfig(format!("group_weights: {e}")))?;
    let noise = Normal::new(0.0, spec.noise_sd)
        .map_err(|e| Error::InvalidConfig(format!("noise_sd: {e}")))?;
    let width = (spec.n_units.max(1) as f64).log10() as usize + 1;

    let names = (1..=k).map(|j| format!("x{j}")).collect();
    let mut raw = RawPanel::new(names);
    let mut labels = Vec::with_capacity(spec.n_units);
    for i in 0..spec.n_units {
        let g = groups.sample(&mut rng);
        let loc = rng.random_range(0..n_loc);
        let mask = draw_mask(spec, i, &mut rng)?;
        let w = match spec.weights {
            WeightLaw::Constant { value } => value,
            WeightLaw::Uniform { low, high } => rng.random_range(low..high),
        };
        labels.push(g);
        let unit = format!("u{:0width$}", i + 1);
        for (t, &observed) in mask.iter().enumerate() {
            let x: Vec<f64> = match &spec.covariates {
                CovariateLaw::StandardNormal => (0..k).map(|_| rng.sample(StandardNormal)).collect(),
                CovariateLaw::Supplied { values } => values[i][t].clone(),
            };
            let eps = noise.sample(&mut rng);
            let y = x.iter().zip(&spec.theta).map(|(a, b)| a * b).sum::<f64>()
                + spec.alpha[g][t]
                + spec.mu[loc]
                + eps;
            raw.push(RawRecord {
                unit: unit.clone(),
                period: spec.first_period + t as i64,
                location: (loc + 1).to_string(),
                outcome: observed.then_some(y),
                covariates: x.into_iter().map(|v| observed.then_some(v)).collect(),
                weight: observed.then_some(w),
                poverty_line: Some(spec.poverty_lines[t]),
            });
        }
    }
    let data = validate_dataset(&raw)?;

    // Locations nobody drew are absent from the dataset; keep the rest.
    let mu = data
        .location_ids()
        .iter()
        .map(|l| spec.mu[l.parse::<usize>().expect("generated label") - 1])
        .collect();
    let alpha = GroupTimeEffects::from_rows(
        spec.alpha
            .iter()
            .map(|row| row.iter().map(|&a| Some(a)).collect())
            .collect(),
    );
    let truth = Truth {
        gamma: GroupAssignment::new(labels, spec.n_groups())?,
        params: ModelParams {
            theta: spec.theta.clone(),
            alpha,
            mu,
            reference_location: 0,
        },
    };
    Ok((data, truth))
}

/// Smallest root-mean-square distance between two group paths, in units of
/// `sigma`. Infinite when `sigma` is 0 or there are fewer than two paths.
pub fn separation(alpha: &[Vec<f64>], sigma: f64) -> f64 {
    if sigma == 0.0 || alpha.len() < 2 {
        return f64::INFINITY;
    }
    let mut best = f64::INFINITY;
    for g in 0..alpha.len() {
        for h in g + 1..alpha.len() {
            let n = alpha[g].len().max(1) as f64;
            let ms = alpha[g]
                .iter()
                .zip(&alpha[h])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / n;
            best = best.min(ms.sqrt());
        }
    }
    best / sigma
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::objective;

    fn small(rotation: Rotation, sigma: f64, seed: u64) -> DgpSpec {
        let mut s = DgpSpec::separated(40, 10, 3, 2, 3, sigma, 3.0, 10, seed);
        s.rotation = rotation;
        s
    }

    #[test]
    fn noiseless_full_panel_has_zero_objective() {
        let (d, truth) = generate(&small(Rotation::Full, 0.0, 1)).unwrap();
        assert_eq!(d.n_obs(), 400);
        let sse = objective(&d, &truth.params, &truth.gamma).unwrap();
        assert!(sse < 1e-20, "{sse}");
    }

    #[test]
    fn window_masks_are_consecutive_runs() {
        let (d, _) = generate(&small(Rotation::Window { len: 3 }, 1.0, 2)).unwrap();
        for u in 0..d.n_units() {
            let periods: Vec<usize> = d.unit_cells(u).map(|c| d.cell_period(c)).collect();
            assert_eq!(periods.len(), 3);
            assert_eq!(periods[2] - periods[0], 2);
        }
        assert_eq!(d.n_periods(), 10);
    }

    #[test]
    fn random_mask_keeps_two_periods() {
        let (d, _) = generate(&small(Rotation::RandomMask { p: 0.15 }, 1.0, 3)).unwrap();
        assert!((0..d.n_units()).all(|u| d.unit_obs_count(u) >= 2));
    }

    #[test]
    fn impossible_mask_reports_unit() {
        let mut s = small(Rotation::RandomMask { p: 1e-9 }, 1.0, 3);
        s.n_units = 2;
        assert!(matches!(
            generate(&s),
            Err(Error::InfeasibleRotation { unit: 0, attempts: MAX_MASK_ATTEMPTS })
        ));
    }

    #[test]
    fn same_seed_same_panel() {
        let s = small(Rotation::Window { len: 4 }, 0.7, 9);
        assert_eq!(generate(&s).unwrap(), generate(&s).unwrap());
        let mut other = s.clone();
        other.seed = 10;
        assert_ne!(generate(&s).unwrap().0, generate(&other).unwrap().0);
    }

    #[test]
    fn noise_variance_close_to_target() {
        let mut s = DgpSpec::separated(4000, 10, 2, 1, 2, 0.8, 3.0, 10, 5);
        s.weights = WeightLaw::Uniform { low: 1.0, high: 3.0 };
        let (d, truth) = generate(&s).unwrap();
        let var = objective(&d, &truth.params, &truth.gamma).unwrap() / d.n_obs() as f64;
        assert!((var / 0.64 - 1.0).abs() < 0.05, "{var}");
        assert!(d.cells().all(|c| (1.0..3.0).contains(&c.weight)));
    }

    #[test]
    fn separation_examples() {
        assert_eq!(separation(&[vec![1.0, 2.0], vec![1.0, 2.0]], 1.0), 0.0);
        assert!((separation(&[vec![0.0, 1.0, 2.0], vec![3.0, 4.0, 5.0]], 1.0) - 3.0).abs() < 1e-15);
        assert!(separation(&[vec![0.0], vec![1.0]], 0.0).is_infinite());
        let s = DgpSpec::separated(10, 6, 3, 1, 1, 0.5, 3.0, 4, 0);
        assert!((separation(&s.alpha, s.noise_sd) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small(Rotation::Window { len: 1 }, 1.0, 0);
        assert!(generate(&s).is_err());
        s.rotation = Rotation::Full;
        s.mu[0] = 0.3;
        assert!(generate(&s).is_err());
    }
}
