//! Panel CSV ingestion: column mapping, row filters, IHS transform and
//! validation.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use gfe_core::{validate_dataset, PanelDataset, RawPanel, RawRecord};
use serde::Serialize;
use tracing::info;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Inverse hyperbolic sine, ln(x + sqrt(x^2 + 1)).
pub fn ihs(x: f64) -> f64 {
    x.asinh()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FilterDrop {
    pub filter: String,
    pub rows_dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    /// Rows removed by each range filter, in configuration order.
    pub range_filters: Vec<FilterDrop>,
    pub min_rounds: usize,
    pub units_dropped_min_rounds: usize,
    pub rows_dropped_min_rounds: usize,
    pub rows_kept: usize,
    pub units_kept: usize,
    pub observed_cells: usize,
    pub ihs: bool,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub data: PanelDataset,
    pub report: IngestReport,
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "na" | "N/A" | ".")
}

struct Columns {
    unit: usize,
    period: usize,
    outcome: usize,
    weight: usize,
    location: usize,
    poverty_line: usize,
    covariates: Vec<usize>,
    filters: Vec<usize>,
    names: Vec<String>,
}

impl Columns {
    fn resolve(header: &csv::StringRecord, cfg: &RunConfig) -> Result<Self> {
        let names: Vec<String> = header.iter().map(str::to_string).collect();
        let find = |name: &str| {
            names
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CliError::MissingColumn(name.to_string()))
        };
        let m = &cfg.columns;
        Ok(Self {
            unit: find(&m.unit)?,
            period: find(&m.period)?,
            outcome: find(&m.outcome)?,
            weight: find(&m.weight)?,
            location: find(&m.location)?,
            poverty_line: find(&m.poverty_line)?,
            covariates: cfg
                .active_covariates()
                .iter()
                .map(|c| find(&c.name))
                .collect::<Result<_>>()?,
            filters: cfg.filters.iter().map(|f| find(&f.column)).collect::<Result<_>>()?,
            names,
        })
    }
}

struct Row<'a> {
    rec: &'a csv::StringRecord,
    line: u64,
    names: &'a [String],
}

impl Row<'_> {
    fn text(&self, col: usize) -> Result<&str> {
        self.rec.get(col).map(str::trim).ok_or_else(|| CliError::Parse {
            line: self.line,
            column: self.names[col].clone(),
            message: "row is shorter than the header".into(),
        })
    }

    fn number(&self, col: usize) -> Result<Option<f64>> {
        let s = self.text(col)?;
        if is_missing(s) {
            return Ok(None);
        }
        s.parse::<f64>().map(Some).map_err(|_| CliError::Parse {
            line: self.line,
            column: self.names[col].clone(),
            message: format!("'{s}' is not a number"),
        })
    }

    fn required(&self, col: usize) -> Result<&str> {
        let s = self.text(col)?;
        if is_missing(s) {
            return Err(CliError::Parse {
                line: self.line,
                column: self.names[col].clone(),
                message: "value is required".into(),
            });
        }
        Ok(s)
    }
}

/// Reads the configured input file.
pub fn ingest(cfg: &RunConfig) -> Result<Ingested> {
    let path = cfg
        .input
        .as_deref()
        .ok_or_else(|| CliError::Config("no input file given".into()))?;
    ingest_path(path, cfg)
}

pub fn ingest_path(path: &Path, cfg: &RunConfig) -> Result<Ingested> {
    let file = std::fs::File::open(path)?;
    ingest_reader(file, cfg)
}

/// Parses a panel CSV, applies range filters (rows with a missing or
/// out-of-range value are dropped), drops units observed in fewer than
/// `min_rounds` periods, transforms outcome and poverty line when `ihs` is
/// set, and validates the result.
pub fn ingest_reader<R: Read>(reader: R, cfg: &RunConfig) -> Result<Ingested> {
    cfg.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let cols = Columns::resolve(&header, cfg)?;
    let covariate_names: Vec<String> = cfg.active_covariates().iter().map(|c| c.name.clone()).collect();

    let mut filter_drops = vec![0usize; cfg.filters.len()];
    let mut rows_read = 0usize;
    let mut records = Vec::new();
    for result in rdr.records() {
        let rec = result?;
        rows_read += 1;
        let line = rec.position().map_or(0, |p| p.line());
        let row = Row { rec: &rec, line, names: &cols.names };

        let mut dropped = false;
        for (j, f) in cfg.filters.iter().enumerate() {
            let keep = match row.number(cols.filters[j])? {
                Some(v) => f.min.is_none_or(|lo| v >= lo) && f.max.is_none_or(|hi| v <= hi),
                None => false,
            };
            if !keep {
                filter_drops[j] += 1;
                dropped = true;
                break;
            }
        }
        if dropped {
            continue;
        }

        let period_text = row.required(cols.period)?;
        let period = period_text.parse::<i64>().map_err(|_| CliError::Parse {
            line,
            column: cols.names[cols.period].clone(),
            message: format!("'{period_text}' is not an integer period"),
        })?;
        let transform = |v: Option<f64>| if cfg.ihs { v.map(ihs) } else { v };
        records.push(RawRecord {
            unit: row.required(cols.unit)?.to_string(),
            period,
            location: row.text(cols.location)?.to_string(),
            outcome: transform(row.number(cols.outcome)?),
            covariates: cols.covariates.iter().map(|&c| row.number(c)).collect::<Result<_>>()?,
            weight: row.number(cols.weight)?,
            poverty_line: transform(row.number(cols.poverty_line)?),
        });
    }

    let observed = |r: &RawRecord| r.outcome.is_some() && r.covariates.iter().all(Option::is_some);
    let mut rounds: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *rounds.entry(r.unit.as_str()).or_default() += usize::from(observed(r));
    }
    let short: std::collections::BTreeSet<String> = rounds
        .iter()
        .filter(|(_, &n)| n < cfg.min_rounds)
        .map(|(u, _)| u.to_string())
        .collect();
    let units_dropped = short.len();
    let before = records.len();
    records.retain(|r| !short.contains(&r.unit));
    let rows_dropped_min_rounds = before - records.len();

    if records.is_empty() && rows_read > 0 {
        return Err(CliError::FilterEliminatedAll);
    }
    let raw = RawPanel {
        covariate_names,
        records,
    };
    let rows_kept = raw.records.len();
    let data = validate_dataset(&raw)?;
    let report = IngestReport {
        rows_read,
        range_filters: cfg
            .filters
            .iter()
            .zip(&filter_drops)
            .map(|(f, &n)| FilterDrop {
                filter: f.column.clone(),
                rows_dropped: n,
            })
            .collect(),
        min_rounds: cfg.min_rounds,
        units_dropped_min_rounds: units_dropped,
        rows_dropped_min_rounds,
        rows_kept,
        units_kept: data.n_units(),
        observed_cells: data.n_obs(),
        ihs: cfg.ihs,
    };
    info!(?report, "ingested panel");
    Ok(Ingested { data, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{CovariateColumn, RangeFilter};

    fn cfg() -> RunConfig {
        RunConfig {
            covariates: vec![CovariateColumn {
                name: "x".into(),
                completion: None,
                sets: vec![],
            }],
            ..RunConfig::default()
        }
    }

    const HEADER: &str = "unit,period,location,outcome,weight,poverty_line,x,age\n";

    #[test]
    fn parse_error_names_line_and_column() {
        let text = format!("{HEADER}a,1,p,1.0,1,0,0.5,30\na,2,p,oops,1,0,0.5,31\n");
        match ingest_reader(text.as_bytes(), &cfg()) {
            Err(CliError::Parse { line, column, .. }) => {
                assert_eq!(line, 3);
                assert_eq!(column, "outcome");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_column_is_reported() {
        let mut c = cfg();
        c.columns.weight = "w".into();
        let text = format!("{HEADER}a,1,p,1.0,1,0,0.5,30\n");
        assert!(matches!(ingest_reader(text.as_bytes(), &c), Err(CliError::MissingColumn(n)) if n == "w"));
    }

    #[test]
    fn filters_count_drops_and_can_eliminate_everything() {
        let text = format!(
            "{HEADER}a,1,p,1,1,0,0,30\na,2,p,1,1,0,0,31\nb,1,p,1,1,0,0,60\nb,2,p,1,1,0,0,61\nc,1,p,1,1,0,0,\n"
        );
        let mut c = cfg();
        c.filters = vec![RangeFilter {
            column: "age".into(),
            min: Some(25.0),
            max: Some(55.0),
        }];
        let got = ingest_reader(text.as_bytes(), &c).unwrap();
        assert_eq!(got.report.rows_read, 5);
        assert_eq!(got.report.range_filters[0].rows_dropped, 3);
        assert_eq!(got.data.n_units(), 1);

        c.filters[0].min = Some(70.0);
        c.filters[0].max = Some(80.0);
        assert!(matches!(ingest_reader(text.as_bytes(), &c), Err(CliError::FilterEliminatedAll)));
    }

    #[test]
    fn ihs_applies_to_outcome_and_line() {
        let text = format!("{HEADER}a,1,p,1,1,1,0,30\na,2,p,0,1,1,0,31\n");
        let mut c = cfg();
        c.ihs = true;
        let got = ingest_reader(text.as_bytes(), &c).unwrap();
        assert_eq!(got.data.outcome(0), 1f64.asinh());
        assert_eq!(got.data.outcome(1), 0.0);
        assert_eq!(got.data.poverty_line(0), 1f64.asinh());
    }
}
