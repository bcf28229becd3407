//! File-level front end for `gfe-core`: panel CSV ingestion with a column
//! mapping config, subcommand pipelines and result table writers.

pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;
pub mod io;

pub use config::{parse_grid, RunConfig};
pub use error::{CliError, Result};
pub use ingest::{ihs, ingest, ingest_path, IngestReport, Ingested};
