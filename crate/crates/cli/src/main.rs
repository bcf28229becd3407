use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gfe_cli::commands;
use gfe_cli::{parse_grid, CliError, Result, RunConfig};
use gfe_core::dgp::DgpSpec;

#[derive(Parser)]
#[command(name = "gfe", version, about = "Grouped fixed-effects estimation for rotating panels")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Log progress to stderr (RUST_LOG also works).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Panel CSV (overrides the config).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_starts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop units observed in fewer periods than this (at least 2).
    #[arg(long)]
    min_rounds: Option<usize>,
    /// Apply the inverse hyperbolic sine to outcome and poverty line.
    #[arg(long, overrides_with = "no_ihs")]
    ihs: bool,
    #[arg(long, overrides_with = "ihs")]
    no_ihs: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-start fit for a fixed number of groups; writes fit.json.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        g: Option<usize>,
    },
    /// Chooses the number of groups by holdout RMSE; writes selection.csv.
    SelectG {
        #[command(flatten)]
        common: Common,
        /// Grid such as 1..6 or 1,2,4.
        #[arg(long)]
        g_grid: Option<String>,
        #[arg(long)]
        fine_n_starts: Option<usize>,
        #[arg(long)]
        shortlist: Option<usize>,
    },
    /// Holdout validation; writes transitions_actual.csv, transitions_pred.csv
    /// and fit_metrics.csv.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        g: Option<usize>,
        /// Periods held out per unit.
        #[arg(long)]
        holdout_periods: Option<usize>,
        /// Transition table CSV to compare against the observed one.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Observed poverty transitions between adjacent periods.
    Transitions {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Completed welfare paths, durations and group profiles.
    Complete {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        g: Option<usize>,
    },
    /// Generates a synthetic panel with panel.csv, truth.json and config.json.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Full generator description as JSON; the flags below build a
    /// separated design instead.
    #[arg(long)]
    dgp: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n_units: usize,
    #[arg(long, default_value_t = 10)]
    n_periods: usize,
    #[arg(long, default_value_t = 3)]
    groups: usize,
    #[arg(long, default_value_t = 2)]
    covariates: usize,
    #[arg(long, default_value_t = 5)]
    locations: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 3.0)]
    separation: f64,
    #[arg(long, default_value_t = 4)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.input {
            cfg.input = Some(v.clone());
        }
        if let Some(v) = &self.out {
            cfg.out_dir = v.clone();
        }
        if let Some(v) = self.n_starts {
            cfg.fit.n_starts = v;
        }
        if let Some(v) = self.seed {
            cfg.fit.seed = v;
        }
        if let Some(v) = self.min_rounds {
            cfg.min_rounds = v;
        }
        if self.ihs {
            cfg.ihs = true;
        }
        if self.no_ihs {
            cfg.ihs = false;
        }
        Ok(cfg)
    }
}

fn with_g(common: &Common, g: Option<usize>) -> Result<RunConfig> {
    let mut cfg = common.resolve()?;
    if let Some(g) = g {
        cfg.n_groups = g;
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit { common, g } => {
            let s = commands::cmd_fit(&with_g(&common, g)?)?;
            println!("fit: G={} sse={}", s.fit.n_groups, s.fit.sse);
        }
        Command::SelectG {
            common,
            g_grid,
            fine_n_starts,
            shortlist,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(g) = g_grid {
                cfg.g_grid = parse_grid(&g)?;
            }
            if let Some(n) = fine_n_starts {
                cfg.fine_n_starts = n;
            }
            if let Some(n) = shortlist {
                cfg.shortlist = n;
            }
            let (s, _) = commands::cmd_select_g(&cfg)?;
            println!("select-g: shortlist={:?} chosen G={}", s.shortlist, s.chosen_g);
        }
        Command::Validate {
            common,
            g,
            holdout_periods,
            reference,
        } => {
            let mut cfg = with_g(&common, g)?;
            if let Some(k) = holdout_periods {
                cfg.holdout_periods = k;
            }
            let s = commands::cmd_validate(&cfg, reference.as_deref())?;
            println!(
                "validate: rmse={} classification accuracy={}",
                s.rmse_test, s.classification.overall.accuracy
            );
        }
        Command::Transitions { common, reference } => {
            let s = commands::cmd_transitions(&common.resolve()?, reference.as_deref())?;
            println!("transitions: {} end periods", s.table.rows.len());
        }
        Command::Complete { common, g } => {
            let s = commands::cmd_complete(&with_g(&common, g)?)?;
            println!(
                "complete: {} imputed, {} absent, {} chronic units",
                s.imputed_cells, s.absent_cells, s.chronic_units
            );
        }
        Command::Simulate(a) => {
            let spec = match &a.dgp {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
                None => DgpSpec::separated(
                    a.n_units,
                    a.n_periods,
                    a.groups,
                    a.covariates,
                    a.locations,
                    a.sigma,
                    a.separation,
                    a.window,
                    a.seed,
                ),
            };
            let (data, _, paths) = commands::cmd_simulate(&spec, &a.out)?;
            println!(
                "simulate: {} units, {} observed cells -> {}",
                data.n_units(),
                data.n_obs(),
                paths.panel.display()
            );
        }
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Fit { .. } => "fit",
        Command::SelectG { .. } => "select-g",
        Command::Validate { .. } => "validate",
        Command::Transitions { .. } => "transitions",
        Command::Complete { .. } => "complete",
        Command::Simulate(_) => "simulate",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(filter)),
        )
        .with_writer(std::io::stderr)
        .init();

    let name = command_name(&cli.command);
    let result = match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))
            .and_then(|_| run(cli.command)),
        None => run(cli.command),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({
                "command": name,
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
