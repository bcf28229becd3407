//! CSV and JSON writers for panels and result tables.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a value
//! read back parses to the same bits.

use std::io::Write;
use std::path::Path;

use gfe_core::completion::CompletedPanel;
use gfe_core::poverty::{DurationReport, GroupProfile, PovertyStatus, TransitionTable, TransitionFitMetrics};
use gfe_core::selection::{Phase, Selection};
use gfe_core::PanelDataset;
use serde::Serialize;

use crate::config::ColumnMap;
use crate::error::{CliError, Result};

pub(crate) fn num(v: f64) -> String {
    format!("{v}")
}

pub(crate) fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::Writer::from_path(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

/// Writes observed cells in the long format `ingest` reads. Periods without
/// any observed cell get one placeholder row with a missing outcome so the
/// period list survives the round trip.
pub fn write_panel(path: &Path, data: &PanelDataset, columns: &ColumnMap) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec![
        columns.unit.clone(),
        columns.period.clone(),
        columns.location.clone(),
        columns.outcome.clone(),
        columns.weight.clone(),
        columns.poverty_line.clone(),
    ];
    header.extend(data.covariate_names().iter().cloned());
    w.write_record(&header)?;
    let mut seen = vec![false; data.n_periods()];
    for c in data.cells() {
        seen[c.period] = true;
        let mut rec = vec![
            data.unit_ids()[c.unit].clone(),
            data.period_ids()[c.period].to_string(),
            data.location_ids()[data.unit_location(c.unit)].clone(),
            num(c.outcome),
            num(c.weight),
            num(c.poverty_line),
        ];
        rec.extend(c.covariates.iter().map(|&x| num(x)));
        w.write_record(&rec)?;
    }
    for (t, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
        let mut rec = vec![
            data.unit_ids()[0].clone(),
            data.period_ids()[t].to_string(),
            data.location_ids()[data.unit_location(0)].clone(),
            String::new(),
            String::new(),
            String::new(),
        ];
        rec.extend(std::iter::repeat_n(String::new(), data.n_covariates()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per grid value: coarse scores, then fine scores when the value
/// was shortlisted.
pub fn write_selection(path: &Path, sel: &Selection) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record([
        "g",
        "sse_coarse",
        "bic_coarse",
        "rmse_coarse",
        "n_starts_coarse",
        "shortlisted",
        "sse_fine",
        "bic_fine",
        "rmse_fine",
        "n_starts_fine",
        "excluded_cells",
        "chosen",
    ])?;
    for r in sel.rows.iter().filter(|r| r.phase == Phase::Coarse) {
        let fine = sel.rows.iter().find(|f| f.phase == Phase::Fine && f.g == r.g);
        let excluded = fine.map_or(r.excluded_cells, |f| f.excluded_cells);
        w.write_record([
            r.g.to_string(),
            num(r.sse_train),
            num(r.bic),
            num(r.rmse_test),
            r.n_starts_used.to_string(),
            fine.is_some().to_string(),
            opt(fine.map(|f| f.sse_train)),
            opt(fine.map(|f| f.bic)),
            opt(fine.map(|f| f.rmse_test)),
            fine.map(|f| f.n_starts_used.to_string()).unwrap_or_default(),
            excluded.to_string(),
            (r.g == sel.chosen_g).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

const SHARE_COLUMNS: [&str; 4] = [
    "share_poor_poor",
    "share_poor_nonpoor",
    "share_nonpoor_poor",
    "share_nonpoor_nonpoor",
];

/// One row per end period: shares, pair counts and total weight. State order
/// is (from, to) = PP, PN, NP, NN.
pub fn write_transitions(path: &Path, table: &TransitionTable) -> Result<()> {
    let mut w = writer(path)?;
    let mut header = vec!["end_period"];
    header.extend(SHARE_COLUMNS);
    header.extend(["n_poor_poor", "n_poor_nonpoor", "n_nonpoor_poor", "n_nonpoor_nonpoor", "weight_total"]);
    w.write_record(&header)?;
    for (t, row) in &table.rows {
        let mut rec = vec![t.to_string()];
        rec.extend(row.shares.iter().map(|&s| num(s)));
        rec.extend(row.counts.iter().map(|n| n.to_string()));
        rec.push(num(row.weight_total));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a transition table from a CSV with an `end_period` column and the
/// four share columns (other columns are ignored). Used to import
/// externally estimated tables for comparison.
pub fn read_transitions(path: &Path) -> Result<TransitionTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    };
    let t_col = find("end_period")?;
    let share_cols: Vec<usize> = SHARE_COLUMNS.iter().map(|c| find(c)).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse_err = |col: usize, msg: String| CliError::Parse {
            line,
            column: header.get(col).unwrap_or_default().to_string(),
            message: msg,
        };
        let t_text = rec.get(t_col).unwrap_or_default().trim();
        let t = t_text
            .parse::<i64>()
            .map_err(|_| parse_err(t_col, format!("'{t_text}' is not an integer period")))?;
        let mut shares = [0.0; 4];
        for (s, &col) in shares.iter_mut().zip(&share_cols) {
            let text = rec.get(col).unwrap_or_default().trim();
            *s = text
                .parse()
                .map_err(|_| parse_err(col, format!("'{text}' is not a number")))?;
        }
        rows.push((t, shares));
    }
    Ok(TransitionTable::from_shares(rows))
}

/// Per-period distances for each named comparison, followed by an `all` row
/// holding the averages.
pub fn write_fit_metrics(path: &Path, comparisons: &[(&str, &TransitionFitMetrics)]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["comparison", "end_period", "mae", "rmse", "tv"])?;
    for (name, m) in comparisons {
        for (t, p) in &m.by_period {
            w.write_record([name.to_string(), t.to_string(), num(p.mae), num(p.rmse), num(p.tv)])?;
        }
        w.write_record([name.to_string(), "all".into(), num(m.mae_avg), num(m.rmse_avg), num(m.tv_avg)])?;
    }
    w.flush()?;
    Ok(())
}

fn status_label(s: Option<PovertyStatus>) -> &'static str {
    match s {
        Some(PovertyStatus::Poor) => "poor",
        Some(PovertyStatus::Nonpoor) => "nonpoor",
        None => "",
    }
}

/// Long format: unit, period, y_comp, source, status.
pub fn write_completed(path: &Path, data: &PanelDataset, cp: &CompletedPanel) -> Result<()> {
    let statuses = cp.statuses(data);
    let mut w = writer(path)?;
    w.write_record(["unit", "period", "y_comp", "source", "status"])?;
    for (u, unit_status) in statuses.iter().enumerate() {
        for (k, &t) in cp.window.iter().enumerate() {
            let source = match cp.source[u][k] {
                gfe_core::Source::Observed => "observed",
                gfe_core::Source::Imputed => "imputed",
                gfe_core::Source::Absent => "absent",
            };
            w.write_record([
                data.unit_ids()[u].clone(),
                data.period_ids()[t].to_string(),
                opt(cp.y[u][k]),
                source.to_string(),
                status_label(unit_status[k]).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Profiles in the order given (highest mean effect first); groups are
/// printed 1-based.
pub fn write_profiles(path: &Path, profiles: &[GroupProfile], covariates: &[String]) -> Result<()> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["rank", "group", "size", "population_share", "mean_alpha", "baseline_outcome"]
        .map(String::from)
        .to_vec();
    header.extend(covariates.iter().map(|c| format!("baseline_{c}")));
    w.write_record(&header)?;
    for (rank, p) in profiles.iter().enumerate() {
        let mut rec = vec![
            (rank + 1).to_string(),
            (p.group + 1).to_string(),
            p.size.to_string(),
            num(p.population_share),
            opt(p.mean_alpha),
            opt(p.baseline_outcome),
        ];
        rec.extend(p.baseline_covariates.iter().map(|&v| opt(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_durations(path: &Path, data: &PanelDataset, report: &DurationReport) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["unit", "poor_share", "chronic", "n_spells", "longest_spell"])?;
    for (u, s) in report.units.iter().enumerate() {
        w.write_record([
            data.unit_ids()[u].clone(),
            num(s.poor_share),
            s.chronic.to_string(),
            s.spells.len().to_string(),
            s.spells.iter().max().copied().unwrap_or(0).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
