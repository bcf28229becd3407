//! Conditional least-squares update: given a grouping, estimate the common
//! slopes, every group-period intercept and the location effects on the
//! observed cells.
//!
//! The group-period indicators are absorbed: their block of the normal
//! equations is diagonal (cell counts), so the system is reduced to the
//! Schur complement over slopes and location effects, solved by Cholesky, and
//! the intercepts are recovered as cell means of the partial residuals. When
//! the reduced system is singular the full normal equations are solved by a
//! symmetric eigendecomposition, which yields the minimum-norm least-squares
//! solution.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::panel::{cell_residual, GroupAssignment, GroupTimeEffects, ModelParams, PanelDataset};

/// Pivot threshold on the unit-diagonal reduced system.
const PIVOT_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest are treated as zero.
const EIGEN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DesignSpec {
    pub n_groups: usize,
    pub include_covariates: bool,
    /// Location whose effect is pinned to zero.
    pub reference_location: usize,
}

impl DesignSpec {
    pub fn new(n_groups: usize) -> Self {
        Self {
            n_groups,
            include_covariates: true,
            reference_location: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsUpdate {
    pub params: ModelParams,
    /// Design was rank-deficient; `params` is the minimum-norm solution.
    pub rank_deficient: bool,
}

/// Least-squares fit over observed cells for the given grouping.
pub fn ols_update(
    data: &PanelDataset,
    gamma: &GroupAssignment,
    spec: &DesignSpec,
) -> Result<OlsUpdate> {
    MaskedOls::new(data, *spec)?.update(gamma)
}

/// Residual `y − x·θ − α − μ` for every observed cell, indexed like the
/// dataset's cells.
pub fn residuals(
    data: &PanelDataset,
    params: &ModelParams,
    gamma: &GroupAssignment,
) -> Result<Vec<f64>> {
    (0..data.n_obs())
        .map(|c| cell_residual(data, params, gamma, c))
        .collect()
}

pub(crate) struct CellSolution {
    /// Intercept per cell, `None` for cells without observations.
    pub cell_effects: Vec<Option<f64>>,
    pub theta: Vec<f64>,
    pub mu: Vec<f64>,
    pub rank_deficient: bool,
}

/// Grouping-independent moments of one dataset, reused across updates.
pub struct MaskedOls<'a> {
    data: &'a PanelDataset,
    spec: DesignSpec,
    /// Covariates entering the design (0 when covariates are excluded).
    k: usize,
    /// Column of each location effect in the reduced system.
    mu_col: Vec<Option<usize>>,
    m: usize,
    btb: DMatrix<f64>,
    bty: DVector<f64>,
}

impl<'a> MaskedOls<'a> {
    pub fn new(data: &'a PanelDataset, spec: DesignSpec) -> Result<Self> {
        if data.n_obs() == 0 {
            return Err(Error::NoObservations);
        }
        if spec.n_groups == 0 {
            return Err(Error::InvalidConfig("number of groups must be >= 1".into()));
        }
        if spec.reference_location >= data.n_locations() {
            return Err(Error::InvalidConfig(format!(
                "reference location {} out of range ({} locations)",
                spec.reference_location,
                data.n_locations()
            )));
        }
        let k = if spec.include_covariates { data.n_covariates() } else { 0 };

        let mut loc_count = vec![0usize; data.n_locations()];
        for c in 0..data.n_obs() {
            loc_count[data.unit_location(data.cell_unit(c))] += 1;
        }
        let mut mu_col = vec![None; data.n_locations()];
        let mut m = k;
        for (p, &n) in loc_count.iter().enumerate() {
            if p != spec.reference_location && n > 0 {
                mu_col[p] = Some(m);
                m += 1;
            }
        }

        let mut btb = DMatrix::<f64>::zeros(m, m);
        let mut bty = DVector::<f64>::zeros(m);
        for c in 0..data.n_obs() {
            let y = data.outcome(c);
            let x = &data.covariates(c)[..k];
            for i in 0..k {
                bty[i] += x[i] * y;
                for j in 0..=i {
                    btb[(i, j)] += x[i] * x[j];
                }
            }
            if let Some(q) = mu_col[data.unit_location(data.cell_unit(c))] {
                bty[q] += y;
                btb[(q, q)] += 1.0;
                for i in 0..k {
                    btb[(q, i)] += x[i];
                }
            }
        }
        for i in 0..m {
            for j in 0..i {
                btb[(j, i)] = btb[(i, j)];
            }
        }

        Ok(Self {
            data,
            spec,
            k,
            mu_col,
            m,
            btb,
            bty,
        })
    }

    pub fn spec(&self) -> &DesignSpec {
        &self.spec
    }

    pub fn data(&self) -> &'a PanelDataset {
        self.data
    }

    /// Fit with full group-by-period intercepts for `gamma`.
    pub fn update(&self, gamma: &GroupAssignment) -> Result<OlsUpdate> {
        if gamma.len() != self.data.n_units() {
            return Err(Error::InvalidConfig(format!(
                "assignment covers {} units, panel has {}",
                gamma.len(),
                self.data.n_units()
            )));
        }
        if gamma.n_groups() != self.spec.n_groups {
            return Err(Error::InvalidConfig(format!(
                "assignment has {} groups, design expects {}",
                gamma.n_groups(),
                self.spec.n_groups
            )));
        }
        let t = self.data.n_periods();
        let cell_of: Vec<usize> = (0..self.data.n_obs())
            .map(|c| gamma.group_of(self.data.cell_unit(c)) * t + self.data.cell_period(c))
            .collect();
        let sol = self.solve_cells(self.spec.n_groups * t, &cell_of);
        let mut alpha = GroupTimeEffects::undefined(self.spec.n_groups, t);
        for (idx, v) in sol.cell_effects.iter().enumerate() {
            alpha.set(idx / t, idx % t, *v);
        }
        Ok(OlsUpdate {
            params: ModelParams {
                theta: sol.theta,
                alpha,
                mu: sol.mu,
                reference_location: self.spec.reference_location,
            },
            rank_deficient: sol.rank_deficient,
        })
    }

    /// Least squares with one free intercept per cell in `cell_of`.
    pub(crate) fn solve_cells(&self, n_cells: usize, cell_of: &[usize]) -> CellSolution {
        let data = self.data;
        let (k, m) = (self.k, self.m);
        let mut count = vec![0usize; n_cells];
        let mut sum_y = vec![0.0; n_cells];
        let mut sum_b = vec![0.0; n_cells * m];
        for (c, &cell) in cell_of.iter().enumerate() {
            count[cell] += 1;
            sum_y[cell] += data.outcome(c);
            let row = &mut sum_b[cell * m..(cell + 1) * m];
            for (acc, x) in row[..k].iter_mut().zip(data.covariates(c)) {
                *acc += x;
            }
            if let Some(q) = self.mu_col[data.unit_location(data.cell_unit(c))] {
                row[q] += 1.0;
            }
        }

        let beta = if m == 0 {
            Some(DVector::zeros(0))
        } else {
            let mut s = self.btb.clone();
            let mut r = self.bty.clone();
            for cell in 0..n_cells {
                if count[cell] == 0 {
                    continue;
                }
                let inv_n = 1.0 / count[cell] as f64;
                let v = &sum_b[cell * m..(cell + 1) * m];
                for i in 0..m {
                    if v[i] == 0.0 {
                        continue;
                    }
                    let vi = v[i] * inv_n;
                    r[i] -= vi * sum_y[cell];
                    for j in 0..m {
                        s[(i, j)] -= vi * v[j];
                    }
                }
            }
            self.solve_reduced(s, r)
        };

        let mut rank_deficient = false;
        let (cell_effects, beta) = match beta {
            Some(beta) => {
                let effects = (0..n_cells)
                    .map(|cell| {
                        (count[cell] > 0).then(|| {
                            let v = &sum_b[cell * m..(cell + 1) * m];
                            let fitted: f64 = v.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                            (sum_y[cell] - fitted) / count[cell] as f64
                        })
                    })
                    .collect();
                (effects, beta)
            }
            None => {
                rank_deficient = true;
                self.solve_full_min_norm(&count, &sum_y, &sum_b)
            }
        };

        let theta = {
            let mut th = vec![0.0; data.n_covariates()];
            th[..k].copy_from_slice(&beta.as_slice()[..k]);
            th
        };
        let mu = self
            .mu_col
            .iter()
            .map(|col| col.map_or(0.0, |q| beta[q]))
            .collect();
        CellSolution {
            cell_effects,
            theta,
            mu,
            rank_deficient,
        }
    }

    /// Solves the reduced system if it is numerically nonsingular.
    fn solve_reduced(&self, s: DMatrix<f64>, r: DVector<f64>) -> Option<DVector<f64>> {
        let m = self.m;
        let mut scale = DVector::zeros(m);
        for j in 0..m {
            let d = s[(j, j)];
            let raw = self.btb[(j, j)];
            // written to also reject NaN pivots
            if !(d > PIVOT_TOL * raw && d > 0.0) {
                return None;
            }
            scale[j] = 1.0 / d.sqrt();
        }
        let mut scaled = s;
        for i in 0..m {
            for j in 0..m {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(scaled)?;
        let l = chol.l_dirty();
        if (0..m).any(|j| l[(j, j)] * l[(j, j)] < PIVOT_TOL) {
            return None;
        }
        let rhs = r.component_mul(&scale);
        let z = chol.solve(&rhs);
        Some(z.component_mul(&scale))
    }

    /// Minimum-norm solution of the full normal equations over the nonempty
    /// cells and the reduced columns.
    fn solve_full_min_norm(
        &self,
        count: &[usize],
        sum_y: &[f64],
        sum_b: &[f64],
    ) -> (Vec<Option<f64>>, DVector<f64>) {
        let m = self.m;
        let cells: Vec<usize> = (0..count.len()).filter(|&c| count[c] > 0).collect();
        let nd = cells.len();
        let p = nd + m;
        let mut a = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for (i, &cell) in cells.iter().enumerate() {
            a[(i, i)] = count[cell] as f64;
            rhs[i] = sum_y[cell];
            for j in 0..m {
                let v = sum_b[cell * m + j];
                a[(i, nd + j)] = v;
                a[(nd + j, i)] = v;
            }
        }
        for i in 0..m {
            rhs[nd + i] = self.bty[i];
            for j in 0..m {
                a[(nd + i, nd + j)] = self.btb[(i, j)];
            }
        }
        let eig = SymmetricEigen::new(a);
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |acc, &l| acc.max(l.abs()));
        let cutoff = EIGEN_TOL * lmax;
        let mut sol = DVector::<f64>::zeros(p);
        for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda > cutoff {
                let v = eig.eigenvectors.column(idx);
                let coef = v.dot(&rhs) / lambda;
                sol.axpy(coef, &v, 1.0);
            }
        }
        let mut effects = vec![None; count.len()];
        for (i, &cell) in cells.iter().enumerate() {
            effects[cell] = Some(sol[i]);
        }
        (effects, sol.rows(nd, m).into_owned())
    }
}


#[cfg(test)]
mod tests {
    use super::oracle::dense_fit;
    use super::*;
    use crate::panel::objective;
    use crate::panel::test_support::{panel, rec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    fn assert_matches_dense(data: &PanelDataset, gamma: &GroupAssignment, tol: f64) {
        let got = ols_update(data, gamma, &DesignSpec::new(gamma.n_groups())).unwrap();
        let want = dense_fit(data, gamma, 0);
        for (a, b) in got.params.theta.iter().zip(&want.theta) {
            assert!(close(*a, *b, tol), "theta {a} vs {b}");
        }
        for (a, b) in got.params.mu.iter().zip(&want.mu) {
            assert!(close(*a, *b, tol), "mu {a} vs {b}");
        }
        for g in 0..gamma.n_groups() {
            for t in 0..data.n_periods() {
                match (got.params.alpha.get(g, t), want.alpha[g][t]) {
                    (Some(a), Some(b)) => assert!(close(a, b, tol), "alpha {a} vs {b}"),
                    (None, None) => {}
                    other => panic!("definedness differs at ({g},{t}): {other:?}"),
                }
            }
        }
    }

    #[test]
    fn cell_means_without_covariates() {
        // periods 1,2; y: a=(1,3) b=(2,-) c=(6,5)
        let d = panel(
            0,
            vec![
                rec("a", 1, "1", 1.0, &[]),
                rec("a", 2, "1", 3.0, &[]),
                rec("b", 1, "1", 2.0, &[]),
                rec("c", 1, "1", 6.0, &[]),
                rec("c", 2, "1", 5.0, &[]),
            ],
        );
        let out = ols_update(&d, &GroupAssignment::constant(3, 1), &DesignSpec::new(1)).unwrap();
        assert_eq!(out.params.alpha.get(0, 0), Some(3.0));
        assert_eq!(out.params.alpha.get(0, 1), Some(4.0));
        assert!(!out.rank_deficient);
        assert_eq!(out.params.mu, vec![0.0]);
    }

    #[test]
    fn small_hand_table_matches_dense_solve() {
        // N=3, T=2, K=1, G=2, two locations.
        let d = panel(
            1,
            vec![
                rec("a", 1, "1", 1.0, &[0.5]),
                rec("a", 2, "1", 2.5, &[1.5]),
                rec("b", 1, "2", 0.3, &[-0.7]),
                rec("b", 2, "2", 1.1, &[0.2]),
                rec("c", 1, "2", 4.0, &[2.0]),
                rec("c", 2, "2", 3.2, &[0.9]),
            ],
        );
        let gamma = GroupAssignment::new(vec![0, 0, 1], 2).unwrap();
        assert_matches_dense(&d, &gamma, 1e-10);
    }

    #[test]
    fn noiseless_data_fit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let theta = [0.7, -1.2];
        let alpha = [[0.0, 0.5, 1.0, 0.2], [2.0, 1.0, 1.5, 3.0]];
        let mu = [0.0, 0.4, -0.3];
        let mut recs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let g = i % 2;
            let p = i % 3;
            labels.push(g);
            for t in 0..4 {
                if (i + t) % 5 == 0 {
                    continue;
                }
                let x = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
                let y = x[0] * theta[0] + x[1] * theta[1] + alpha[g][t] + mu[p];
                recs.push(rec(&format!("u{i}"), t as i64, &p.to_string(), y, &x));
            }
        }
        let d = panel(2, recs);
        let gamma = GroupAssignment::new(labels, 2).unwrap();
        let out = ols_update(&d, &gamma, &DesignSpec::new(2)).unwrap();
        let sse = objective(&d, &out.params, &gamma).unwrap();
        let sy2: f64 = d.cells().map(|c| c.outcome * c.outcome).sum();
        assert!(sse <= 1e-16 * sy2, "sse {sse}");
        assert!((out.params.theta[0] - 0.7).abs() < 1e-10);
        assert_eq!(out.params.mu[0], 0.0);
    }

    #[test]
    fn empty_cells_left_undefined() {
        let d = panel(
            0,
            vec![
                rec("a", 1, "1", 1.0, &[]),
                rec("a", 2, "1", 2.0, &[]),
                rec("b", 2, "1", 5.0, &[]),
            ],
        );
        let gamma = GroupAssignment::new(vec![0, 1], 3).unwrap();
        let out = ols_update(&d, &gamma, &DesignSpec::new(3)).unwrap();
        assert_eq!(out.params.alpha.get(1, 0), None);
        assert_eq!(out.params.alpha.get(1, 1), Some(5.0));
        assert_eq!(out.params.alpha.row(2), &[None, None]);
    }

    #[test]
    fn collinear_covariate_gives_min_norm_and_flag() {
        // x1 duplicates a period indicator: collinear with group-period dummies.
        let d = panel(
            1,
            vec![
                rec("a", 1, "1", 1.0, &[1.0]),
                rec("a", 2, "1", 2.0, &[0.0]),
                rec("b", 1, "1", 1.4, &[1.0]),
                rec("b", 2, "1", 2.6, &[0.0]),
            ],
        );
        let gamma = GroupAssignment::constant(2, 1);
        let out = ols_update(&d, &gamma, &DesignSpec::new(1)).unwrap();
        assert!(out.rank_deficient);
        let want = dense_fit(&d, &gamma, 0);
        assert!(close(out.params.theta[0], want.theta[0], 1e-8));
        assert!(close(out.params.alpha.get(0, 0).unwrap(), want.alpha[0][0].unwrap(), 1e-8));
        // min-norm: theta + alpha(.,1) = 1.2 split evenly
        assert!((out.params.theta[0] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn location_group_confounding_is_min_norm() {
        // group 2 lives entirely in location 2: alpha(2,.) and mu_2 collinear.
        let d = panel(
            0,
            vec![
                rec("a", 1, "1", 1.0, &[]),
                rec("a", 2, "1", 2.0, &[]),
                rec("b", 1, "2", 4.0, &[]),
                rec("b", 2, "2", 6.0, &[]),
            ],
        );
        let gamma = GroupAssignment::new(vec![0, 1], 2).unwrap();
        let out = ols_update(&d, &gamma, &DesignSpec::new(2)).unwrap();
        assert!(out.rank_deficient);
        assert_matches_dense(&d, &gamma, 1e-8);
        assert!(objective(&d, &out.params, &gamma).unwrap() < 1e-20);
    }

    #[test]
    fn no_observations_rejected() {
        let d = panel(0, vec![rec("a", 1, "1", 1.0, &[])]);
        let empty = PanelDataset::clone(&d);
        // A dataset with zero cells cannot be validated, so check the guard
        // through the design constructor on a restricted copy.
        assert!(empty.restrict(|_| false).is_err());
        let bad_ref = DesignSpec {
            reference_location: 5,
            ..DesignSpec::new(1)
        };
        assert!(ols_update(&d, &GroupAssignment::constant(1, 1), &bad_ref).is_err());
    }

    #[test]
    fn residuals_of_zero_params_are_outcomes() {
        let d = panel(1, vec![rec("a", 1, "1", 1.5, &[2.0]), rec("a", 2, "1", -0.5, &[1.0])]);
        let params = ModelParams {
            theta: vec![0.0],
            alpha: GroupTimeEffects::from_rows(vec![vec![Some(0.0), Some(0.0)]]),
            mu: vec![0.0],
            reference_location: 0,
        };
        let r = residuals(&d, &params, &GroupAssignment::constant(1, 1)).unwrap();
        assert_eq!(r, vec![1.5, -0.5]);
    }

    #[test]
    fn residuals_hand_instance() {
        let d = panel(
            1,
            vec![
                rec("a", 1, "1", 3.0, &[1.0]),
                rec("a", 2, "1", 1.0, &[2.0]),
                rec("b", 1, "2", 0.5, &[-1.0]),
                rec("b", 2, "2", 2.0, &[4.0]),
            ],
        );
        let params = ModelParams {
            theta: vec![0.5],
            alpha: GroupTimeEffects::from_rows(vec![
                vec![Some(1.0), Some(2.0)],
                vec![Some(0.0), Some(-1.0)],
            ]),
            mu: vec![0.0, 0.25],
            reference_location: 0,
        };
        let gamma = GroupAssignment::new(vec![0, 1], 2).unwrap();
        let r = residuals(&d, &params, &gamma).unwrap();
        assert_eq!(r, vec![1.5, -2.0, 0.75, 0.75]);
    }

    fn random_panel(seed: u64, n: usize, t: usize, k: usize, l: usize, g: usize) -> (PanelDataset, GroupAssignment) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut recs = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            labels.push(rng.random_range(0..g));
            let loc = rng.random_range(0..l);
            let mut any = false;
            for p in 0..t {
                if rng.random_bool(0.7) || (!any && p == t - 1) {
                    any = true;
                    let x: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let y = rng.random_range(-3.0..3.0);
                    recs.push(rec(&format!("u{i}"), p as i64, &loc.to_string(), y, &x));
                }
            }
        }
        let d = panel(k, recs);
        (d, GroupAssignment::new(labels, g).unwrap())
    }

    #[test]
    fn optimality_against_perturbed_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let (d, gamma) = random_panel(seed, 8, 3, 1, 2, 2);
            let best = ols_update(&d, &gamma, &DesignSpec::new(2)).unwrap().params;
            let q = objective(&d, &best, &gamma).unwrap();
            for _ in 0..20 {
                let mut p = best.clone();
                p.theta[0] += rng.random_range(-0.5..0.5);
                for g in 0..2 {
                    for t in 0..3 {
                        if let Some(a) = p.alpha.get(g, t) {
                            p.alpha.set(g, t, Some(a + rng.random_range(-0.5..0.5)));
                        }
                    }
                }
                if p.mu.len() > 1 {
                    p.mu[1] += rng.random_range(-0.5..0.5);
                }
                assert!(q <= objective(&d, &p, &gamma).unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn refitting_own_output_is_stable() {
        let (d, gamma) = random_panel(5, 20, 4, 2, 3, 3);
        let a = ols_update(&d, &gamma, &DesignSpec::new(3)).unwrap();
        let b = ols_update(&d, &gamma, &DesignSpec::new(3)).unwrap();
        assert_eq!(a, b);
        // Residuals of the fit carry no further signal.
        let r = residuals(&d, &a.params, &gamma).unwrap();
        let raw = d.to_raw();
        let mut shifted = raw.clone();
        for (rec, res) in shifted.records.iter_mut().zip(&r) {
            rec.outcome = Some(*res);
        }
        let rd = crate::panel::validate_dataset(&shifted).unwrap();
        let again = ols_update(&rd, &gamma, &DesignSpec::new(3)).unwrap();
        assert!(again.params.theta.iter().all(|v| v.abs() < 1e-10));
        assert!(again.params.mu.iter().all(|v| v.abs() < 1e-10));
        for row in again.params.alpha.rows() {
            assert!(row.iter().flatten().all(|v| v.abs() < 1e-10));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn matches_dense_reference(seed in 0u64..10_000, g in 1usize..4, k in 0usize..3, l in 1usize..4) {
            let (d, gamma) = random_panel(seed, 12, 4, k, l, g);
            assert_matches_dense(&d, &gamma, 1e-8);
        }
    }
}
