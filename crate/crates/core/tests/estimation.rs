use gfe_core::dgp::{generate, DgpSpec, Rotation};
use gfe_core::search::{refine, vns_fit_observed, RefineTrace, SearchObserver};
use gfe_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn separable(seed: u64) -> (PanelDataset, dgp::Truth) {
    generate(&DgpSpec::separated(120, 8, 3, 2, 4, 0.5, 4.0, 4, seed)).unwrap()
}

#[test]
fn same_seed_same_fit() {
    let (d, _) = separable(1);
    let cfg = FitConfig { n_starts: 2, base_seed: 77, ..FitConfig::with_groups(3) };
    let a = multi_start_fit(&d, &DesignSpec::new(3), &cfg).unwrap();
    let b = multi_start_fit(&d, &DesignSpec::new(3), &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn one_start_equals_vns_fit() {
    let (d, _) = separable(2);
    let cfg = FitConfig { n_starts: 1, ..FitConfig::with_groups(3) };
    let spec = DesignSpec::new(3);
    assert_eq!(multi_start_fit(&d, &spec, &cfg).unwrap(), vns_fit(&d, &spec, &cfg, 0).unwrap());
}

#[test]
fn reported_sse_matches_objective() {
    for seed in 0..5 {
        let (d, _) = separable(seed);
        let fit = multi_start_fit(&d, &DesignSpec::new(3), &FitConfig::with_groups(3)).unwrap();
        let q = objective(&d, &fit.params, &fit.gamma).unwrap();
        assert!((fit.sse - q).abs() <= 1e-9 * q.max(1.0));
    }
}

#[test]
fn more_starts_never_worse() {
    let (d, _) = separable(3);
    let spec = DesignSpec::new(3);
    let mut last = f64::INFINITY;
    for n in 1..=6 {
        let cfg = FitConfig { n_starts: n, base_seed: 5, ..FitConfig::with_groups(3) };
        let sse = multi_start_fit(&d, &spec, &cfg).unwrap().sse;
        assert!(sse <= last, "{n} starts: {sse} > {last}");
        last = sse;
    }
}

#[test]
fn refine_lowers_sse_from_random_partition() {
    let (d, _) = generate(&DgpSpec::separated(80, 6, 2, 1, 2, 0.5, 4.0, 6, 11)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let spec = DesignSpec::new(2);
    for _ in 0..10 {
        let labels = (0..d.n_units()).map(|_| rng.random_range(0..2)).collect();
        let gamma = GroupAssignment::new(labels, 2).unwrap();
        let before = {
            let u = ols_update(&d, &gamma, &spec).unwrap();
            objective(&d, &u.params, &gamma).unwrap()
        };
        let r = refine(&d, &gamma, &spec, 2).unwrap();
        assert!(r.sse < before);
        assert!(!r.trace.has_increase(1e-12));
    }
}

#[test]
fn noiseless_panel_fits_exactly() {
    let mut spec = DgpSpec::separated(60, 6, 3, 2, 3, 0.0, 3.0, 6, 8);
    spec.rotation = Rotation::Full;
    let (d, truth) = generate(&spec).unwrap();
    let fit = multi_start_fit(&d, &DesignSpec::new(3), &FitConfig::with_groups(3)).unwrap();
    let scale: f64 = d.cells().map(|c| c.outcome * c.outcome).sum();
    assert!(fit.sse <= 1e-20 * scale, "{}", fit.sse);
    assert_eq!(adjusted_rand_index(fit.gamma.labels(), truth.gamma.labels()), 1.0);
}

#[derive(Default)]
struct Recorder {
    traces: Vec<RefineTrace>,
    accepted: Vec<f64>,
}

impl SearchObserver for Recorder {
    fn on_refine(&mut self, t: &RefineTrace) {
        self.traces.push(*t);
    }
    fn on_accept(&mut self, _cycle: usize, _size: usize, sse: f64) {
        self.accepted.push(sse);
    }
}

#[test]
fn observer_sees_descent_and_decreasing_incumbent() {
    let (d, _) = separable(4);
    let cfg = FitConfig::with_groups(3);
    let mut rec = Recorder::default();
    let fit = vns_fit_observed(&d, &DesignSpec::new(3), &cfg, 0, &mut rec).unwrap();
    assert_eq!(rec.traces.len(), fit.n_shakes + 1);
    assert!(rec.traces.iter().all(|t| !t.has_increase(1e-12)));
    assert!(rec.traces.iter().all(|t| t.passes <= cfg.max_local_iters));
    assert_eq!(rec.accepted.len(), fit.n_accepted);
    assert!(rec.accepted.windows(2).all(|w| w[1] < w[0]));
    assert_eq!(rec.accepted.last().copied().unwrap_or(fit.sse), fit.sse);
    assert_eq!(fit.n_vns_cycles, cfg.itermax);
}

#[test]
fn label_permutation_keeps_objective_and_rmse() {
    let (d, _) = separable(5);
    let split = last_year_holdout(&d).unwrap();
    let fit = multi_start_fit(&split.train, &DesignSpec::new(3), &FitConfig::with_groups(3)).unwrap();
    let perm = [2, 0, 1];
    let mut rows = vec![Vec::new(); 3];
    for g in 0..3 {
        rows[perm[g]] = fit.params.alpha.row(g).to_vec();
    }
    let params = ModelParams { alpha: GroupTimeEffects::from_rows(rows), ..fit.params.clone() };
    let gamma = GroupAssignment::new(partition::permute_labels(fit.gamma.labels(), &perm), 3).unwrap();
    assert_eq!(objective(&split.train, &params, &gamma).unwrap(), fit.sse);
    let a = holdout_rmse(&fit.params, &fit.gamma, &d, &split).unwrap();
    let b = holdout_rmse(&params, &gamma, &d, &split).unwrap();
    assert_eq!(a, b);
}

#[test]
fn selection_grid_of_one() {
    let (d, _) = separable(6);
    let cfg = FitConfig::with_groups(1);
    let s = select_g(&d, &[1], &cfg, &cfg, 6, &DesignSpec::new(1)).unwrap();
    assert_eq!(s.chosen_g, 1);
    assert_eq!(s.shortlist, vec![1]);
    assert_eq!(s.rows.iter().filter(|r| r.phase == selection::Phase::Coarse).count(), 1);
}
