//! Subcommand pipelines. Each reads the configured panel, runs the
//! estimation or analysis, writes its artifacts to `out_dir` and returns the
//! JSON summary it wrote.

use std::path::{Path, PathBuf};

use gfe_core::completion::Fill;
use gfe_core::dgp::{generate, DgpSpec, Truth};
use gfe_core::poverty::{poverty_status, TransitionPair, TransitionTable};
use gfe_core::selection::Selection;
use gfe_core::*;
use serde::Serialize;
use tracing::info;

use crate::config::{ColumnMap, CovariateColumn, RunConfig};
use crate::error::{CliError, Result};
use crate::ingest::{ingest, IngestReport, Ingested};
use crate::io;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    Ok(&cfg.out_dir)
}

/// Location index pinned to zero: the configured label, else the first.
pub fn design_spec(cfg: &RunConfig, data: &PanelDataset, g: usize) -> Result<DesignSpec> {
    let reference_location = match &cfg.reference_location {
        Some(label) => data
            .location_ids()
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| CliError::Config(format!("reference location '{label}' not in data")))?,
        None => 0,
    };
    Ok(DesignSpec {
        reference_location,
        ..DesignSpec::new(g)
    })
}

pub fn fit_dataset(cfg: &RunConfig, data: &PanelDataset, g: usize) -> Result<FitResult> {
    let spec = design_spec(cfg, data, g)?;
    Ok(multi_start_fit(data, &spec, &cfg.fit.to_fit_config(g))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Named {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodEffect {
    pub period: i64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupPath {
    pub group: usize,
    pub size: usize,
    pub alpha: Vec<PeriodEffect>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitGroup {
    pub unit: String,
    pub group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchDiagnostics {
    pub n_starts: usize,
    pub best_start: usize,
    pub stream_seed: u64,
    pub n_vns_cycles: usize,
    pub n_shakes: usize,
    pub n_accepted: usize,
    pub rank_deficient_ever: bool,
}

fn named<'a>(names: impl IntoIterator<Item = &'a String>, values: &[f64]) -> Vec<Named> {
    names
        .into_iter()
        .zip(values)
        .map(|(n, &v)| Named { name: n.clone(), value: v })
        .collect()
}

fn group_paths(params: &ModelParams, gamma: &GroupAssignment, data: &PanelDataset) -> Vec<GroupPath> {
    let sizes = gamma.group_sizes();
    (0..params.n_groups())
        .map(|g| GroupPath {
            group: g + 1,
            size: sizes[g],
            alpha: data
                .period_ids()
                .iter()
                .zip(params.alpha.row(g))
                .map(|(&period, &value)| PeriodEffect { period, value })
                .collect(),
        })
        .collect()
}

fn assignment(gamma: &GroupAssignment, data: &PanelDataset) -> Vec<UnitGroup> {
    data.unit_ids()
        .iter()
        .zip(gamma.labels())
        .map(|(u, &g)| UnitGroup { unit: u.clone(), group: g + 1 })
        .collect()
}

/// Fitted model in file form. Groups are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub n_groups: usize,
    pub seed: u64,
    pub sse: f64,
    pub n_obs: usize,
    pub n_params: usize,
    /// None when the parameter count reaches the observation count.
    pub bic: Option<f64>,
    pub theta: Vec<Named>,
    pub reference_location: String,
    pub mu: Vec<Named>,
    pub groups: Vec<GroupPath>,
    pub assignment: Vec<UnitGroup>,
    pub diagnostics: SearchDiagnostics,
}

impl FitReport {
    pub fn new(fit: &FitResult, data: &PanelDataset, cfg: &RunConfig) -> Self {
        let p = &fit.params;
        let bic = gfe_core::bic(p, &fit.gamma, data).ok();
        Self {
            n_groups: fit.gamma.n_groups(),
            seed: cfg.fit.seed,
            sse: fit.sse,
            n_obs: data.n_obs(),
            n_params: parameter_count(p, data),
            bic: bic.map(|b| b.bic),
            theta: named(data.covariate_names(), &p.theta),
            reference_location: data.location_ids()[p.reference_location].clone(),
            mu: named(data.location_ids(), &p.mu),
            groups: group_paths(p, &fit.gamma, data),
            assignment: assignment(&fit.gamma, data),
            diagnostics: SearchDiagnostics {
                n_starts: cfg.fit.n_starts,
                best_start: fit.start_index,
                stream_seed: fit.seed,
                n_vns_cycles: fit.n_vns_cycles,
                n_shakes: fit.n_shakes,
                n_accepted: fit.n_accepted,
                rank_deficient_ever: fit.rank_deficient_ever,
            },
        }
    }
}

/// Content of fit.json. Holds nothing that varies between identical runs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitSummary {
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub ingest: IngestReport,
    pub fit: FitReport,
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<FitSummary> {
    let Ingested { data, report } = ingest(cfg)?;
    let fit = fit_dataset(cfg, &data, cfg.n_groups)?;
    info!(g = cfg.n_groups, sse = fit.sse, "fit done");
    let summary = FitSummary {
        version: VERSION,
        command: "fit",
        config: cfg.clone(),
        ingest: report,
        fit: FitReport::new(&fit, &data, cfg),
    };
    io::write_json(&out_dir(cfg)?.join("fit.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionSummary {
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub ingest: IngestReport,
    pub grid: Vec<usize>,
    pub shortlist: Vec<usize>,
    pub chosen_g: usize,
}

pub fn cmd_select_g(cfg: &RunConfig) -> Result<(SelectionSummary, Selection)> {
    let Ingested { data, report } = ingest(cfg)?;
    let spec = design_spec(cfg, &data, 1)?;
    let coarse = cfg.fit.to_fit_config(1);
    let fine = gfe_core::FitConfig {
        n_starts: cfg.fine_n_starts,
        ..coarse.clone()
    };
    let sel = select_g(&data, &cfg.g_grid, &coarse, &fine, cfg.shortlist, &spec)?;
    let dir = out_dir(cfg)?;
    io::write_selection(&dir.join("selection.csv"), &sel)?;
    let summary = SelectionSummary {
        version: VERSION,
        command: "select-g",
        config: cfg.clone(),
        ingest: report,
        grid: cfg.g_grid.clone(),
        shortlist: sel.shortlist.clone(),
        chosen_g: sel.chosen_g,
    };
    io::write_json(&dir.join("selection.json"), &summary)?;
    Ok((summary, sel))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OneStepSummary {
    pub accuracy: f64,
    pub misclassification: f64,
    pub n_pairs: usize,
    pub excluded_nonconsecutive: usize,
    pub excluded_undefined: usize,
    pub tv_avg: f64,
    pub tv_max: f64,
    pub mae_avg: f64,
    pub rmse_avg: f64,
    /// Reference table against the observed one, when supplied.
    pub reference_tv_avg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationSummary {
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub ingest: IngestReport,
    pub holdout_periods: usize,
    pub sse_train: f64,
    pub rmse_test: f64,
    pub scored_cells: usize,
    pub excluded_cells: usize,
    pub classification: poverty::HoldoutClassification,
    /// Only for a one-period holdout.
    pub one_step: Option<OneStepSummary>,
}

/// Fits on the training mask and scores the held-out periods: outcome RMSE,
/// poverty classification and, for a one-period holdout, one-step
/// transition tables compared with the observed ones (and with an optional
/// reference table).
pub fn cmd_validate(cfg: &RunConfig, reference: Option<&Path>) -> Result<ValidationSummary> {
    let Ingested { data, report } = ingest(cfg)?;
    let split = last_years_holdout(&data, cfg.holdout_periods)?;
    let fit = fit_dataset(cfg, &split.train, cfg.n_groups)?;
    let score = holdout_rmse(&fit.params, &fit.gamma, &data, &split)?;
    let classification = holdout_classification(&fit.params, &fit.gamma, &data, &split)?;
    let dir = out_dir(cfg)?;
    let one_step = if cfg.holdout_periods == 1 {
        let v = one_step_validation(&fit.params, &fit.gamma, &data, &split)?;
        io::write_transitions(&dir.join("transitions_actual.csv"), &v.actual)?;
        io::write_transitions(&dir.join("transitions_pred.csv"), &v.predicted)?;
        let m = transition_fit(&v.predicted, &v.actual)?;
        let reference_fit = reference
            .map(|p| io::read_transitions(p).and_then(|t| Ok(transition_fit(&t, &v.actual)?)))
            .transpose()?;
        let mut comparisons = vec![("model_vs_actual", &m)];
        if let Some(r) = &reference_fit {
            comparisons.push(("reference_vs_actual", r));
        }
        io::write_fit_metrics(&dir.join("fit_metrics.csv"), &comparisons)?;
        Some(OneStepSummary {
            accuracy: v.accuracy,
            misclassification: v.misclassification,
            n_pairs: v.n_pairs,
            excluded_nonconsecutive: v.excluded_nonconsecutive,
            excluded_undefined: v.excluded_undefined,
            tv_avg: m.tv_avg,
            tv_max: m.tv_max,
            mae_avg: m.mae_avg,
            rmse_avg: m.rmse_avg,
            reference_tv_avg: reference_fit.map(|r| r.tv_avg),
        })
    } else {
        None
    };
    let summary = ValidationSummary {
        version: VERSION,
        command: "validate",
        config: cfg.clone(),
        ingest: report,
        holdout_periods: cfg.holdout_periods,
        sse_train: fit.sse,
        rmse_test: score.rmse,
        scored_cells: score.scored,
        excluded_cells: score.excluded,
        classification,
        one_step,
    };
    io::write_json(&dir.join("validation.json"), &summary)?;
    Ok(summary)
}

/// Observed transitions: every pair of a unit's observations in adjacent
/// panel periods, weighted by the end-period weight.
pub fn observed_transitions(data: &PanelDataset) -> TransitionTable {
    let mut pairs = Vec::new();
    for u in 0..data.n_units() {
        let cells: Vec<usize> = data.unit_cells(u).collect();
        for w in cells.windows(2) {
            let (a, b) = (w[0], w[1]);
            if data.cell_period(a) + 1 != data.cell_period(b) {
                continue;
            }
            pairs.push(TransitionPair {
                end_period: data.period_ids()[data.cell_period(b)],
                from: poverty_status(data.outcome(a), data.poverty_line(a)),
                to: poverty_status(data.outcome(b), data.poverty_line(b)),
                weight: data.weight(b),
            });
        }
    }
    transition_table(&pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransitionsSummary {
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub ingest: IngestReport,
    pub table: TransitionTable,
    pub reference_fit: Option<poverty::TransitionFitMetrics>,
}

pub fn cmd_transitions(cfg: &RunConfig, reference: Option<&Path>) -> Result<TransitionsSummary> {
    let Ingested { data, report } = ingest(cfg)?;
    let table = observed_transitions(&data);
    let dir = out_dir(cfg)?;
    io::write_transitions(&dir.join("transitions_actual.csv"), &table)?;
    let reference_fit = match reference {
        Some(p) => {
            let m = transition_fit(&io::read_transitions(p)?, &table)?;
            io::write_fit_metrics(&dir.join("fit_metrics.csv"), &[("reference_vs_actual", &m)])?;
            Some(m)
        }
        None => None,
    };
    let summary = TransitionsSummary {
        version: VERSION,
        command: "transitions",
        config: cfg.clone(),
        ingest: report,
        table,
        reference_fit,
    };
    io::write_json(&dir.join("transitions.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompletionSummary {
    pub version: &'static str,
    pub command: &'static str,
    pub config: RunConfig,
    pub ingest: IngestReport,
    pub sse: f64,
    pub window: Vec<i64>,
    pub observed_cells: usize,
    pub imputed_cells: usize,
    pub absent_cells: usize,
    /// Covariate values filled by moving age backward in time.
    pub backward_age_fills: usize,
    pub chronic_min: usize,
    pub chronic_units: usize,
    pub spell_lengths: std::collections::BTreeMap<usize, usize>,
}

/// Refits on the full panel, completes every unit's path over the periods
/// with at least one defined group effect, and summarizes durations and
/// group profiles.
pub fn cmd_complete(cfg: &RunConfig) -> Result<CompletionSummary> {
    let Ingested { data, report } = ingest(cfg)?;
    let fit = fit_dataset(cfg, &data, cfg.n_groups)?;
    let policy = CompletionPolicy {
        id: cfg.covariate_set.clone().unwrap_or_else(|| "all".into()),
        rules: cfg.active_covariates().iter().map(|c| c.completion).collect(),
    };
    let cc = complete_covariates(&data, &policy)?;
    let window: Vec<usize> = (0..data.n_periods())
        .filter(|&t| (0..fit.params.n_groups()).any(|g| fit.params.alpha.get(g, t).is_some()))
        .collect();
    let cp = complete_paths(&fit.params, &fit.gamma, &data, &cc, &window, &policy.id)?;
    let durations = duration_summaries(&cp.statuses(&data), cfg.chronic_min);

    let baseline: Vec<String> = match &cfg.baseline_covariates {
        Some(names) => names.clone(),
        None => data.covariate_names().to_vec(),
    };
    let baseline_idx: Vec<usize> = baseline
        .iter()
        .map(|n| {
            data.covariate_index(n)
                .ok_or_else(|| CliError::Config(format!("baseline covariate '{n}' is not an active covariate")))
        })
        .collect::<Result<_>>()?;
    let profiles = group_profiles(&fit.params, &fit.gamma, &data, &baseline_idx);

    let dir = out_dir(cfg)?;
    io::write_completed(&dir.join("completed_panel.csv"), &data, &cp)?;
    io::write_profiles(&dir.join("profiles.csv"), &profiles, &baseline)?;
    io::write_durations(&dir.join("durations.csv"), &data, &durations)?;

    let count = |s: Source| cp.source.iter().flatten().filter(|&&x| x == s).count();
    let backward_age_fills = (0..data.n_units())
        .flat_map(|u| window.iter().map(move |&t| (u, t)))
        .map(|(u, t)| cc.fills(u, t).iter().filter(|&&f| f == Fill::AgeBackward).count())
        .sum();
    let summary = CompletionSummary {
        version: VERSION,
        command: "complete",
        config: cfg.clone(),
        ingest: report,
        sse: fit.sse,
        window: window.iter().map(|&t| data.period_ids()[t]).collect(),
        observed_cells: count(Source::Observed),
        imputed_cells: count(Source::Imputed),
        absent_cells: cp.n_absent,
        backward_age_fills,
        chronic_min: cfg.chronic_min,
        chronic_units: durations.units.iter().filter(|d| d.chronic).count(),
        spell_lengths: durations.spell_lengths.clone(),
    };
    io::write_json(&dir.join("complete.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TruthFile {
    pub version: &'static str,
    pub dgp: DgpSpec,
    pub separation: f64,
    pub theta: Vec<f64>,
    pub mu: Vec<Named>,
    pub groups: Vec<GroupPath>,
    pub assignment: Vec<UnitGroup>,
}

/// Paths written by `cmd_simulate`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub panel: PathBuf,
    pub truth: PathBuf,
    pub config: PathBuf,
}

/// Generates a panel and writes `panel.csv`, `truth.json` and a
/// `config.json` that `fit` and the other subcommands accept as is.
pub fn cmd_simulate(spec: &DgpSpec, out: &Path) -> Result<(PanelDataset, Truth, SimulationOutput)> {
    let (data, truth) = generate(spec)?;
    std::fs::create_dir_all(out)?;
    let columns = ColumnMap::default();
    let paths = SimulationOutput {
        panel: out.join("panel.csv"),
        truth: out.join("truth.json"),
        config: out.join("config.json"),
    };
    io::write_panel(&paths.panel, &data, &columns)?;

    let truth_file = TruthFile {
        version: VERSION,
        dgp: spec.clone(),
        separation: gfe_core::dgp::separation(&spec.alpha, spec.noise_sd),
        theta: truth.params.theta.clone(),
        mu: named(data.location_ids(), &truth.params.mu),
        groups: group_paths(&truth.params, &truth.gamma, &data),
        assignment: assignment(&truth.gamma, &data),
    };
    io::write_json(&paths.truth, &truth_file)?;

    let run = RunConfig {
        input: Some(PathBuf::from("panel.csv")),
        columns,
        covariates: data
            .covariate_names()
            .iter()
            .map(|n| CovariateColumn {
                name: n.clone(),
                completion: Some(gfe_core::completion::ColumnRule::TimeInvariant),
                sets: vec![],
            })
            .collect(),
        n_groups: spec.alpha.len(),
        ..RunConfig::default()
    };
    // out_dir is not serialized, so the written config carries no output path
    io::write_json(&paths.config, &run)?;
    Ok((data, truth, paths))
}
