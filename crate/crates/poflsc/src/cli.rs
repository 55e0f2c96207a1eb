//! Command-line interface.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid input (usage, config,
//! unreadable file), 3 no core pool formed, 4 ledger verification failed.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use poflsc_core::config::ScenarioConfig;
use poflsc_core::ledger::{verify_chain, ChainStatus};
use poflsc_core::sim::{self, run_block_with, shrink_curve, valuate_pool, Overrides, ScenarioReport};
use poflsc_core::trace::Trace;
use poflsc_core::valuation::{Estimator, ShapleyReport};
use poflsc_core::verification::type_one_check;

use crate::error::{ExitCode, Result};
use crate::io::{self, OrderColumns};
use crate::parallel::Parallel;

#[derive(Debug, Parser)]
#[command(name = "poflsc", version, about = "PoFLSC subchain consensus simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Order {
    Asc,
    Desc,
    Both,
}

impl From<Order> for OrderColumns {
    fn from(o: Order) -> Self {
        match o {
            Order::Asc => OrderColumns::Ascending,
            Order::Desc => OrderColumns::Descending,
            Order::Both => OrderColumns::Both,
        }
    }
}

fn parse_estimator(s: &str) -> std::result::Result<Estimator, String> {
    Estimator::parse(s).ok_or_else(|| format!("unknown estimator `{s}` (expected loo, tmc, gshapley or exact)"))
}

#[derive(Debug, clap::Args)]
pub struct ScenarioArgs {
    /// Scenario file, TOML or JSON.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one block: writes report.json, chain.bin and trace.jsonl.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Overrides `sv_estimator`.
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<Estimator>,
    },
    /// Value the demonstration pool: Shapley, histogram and scatter CSVs.
    Valuate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<Estimator>,
    },
    /// Shrink the demonstration pool along both reservation orders.
    Shrink {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Defaults to every configured estimator.
        #[arg(long, value_parser = parse_estimator)]
        estimator: Option<Estimator>,
        #[arg(long, value_enum, default_value = "both")]
        order: Order,
    },
    /// Check a chain.bin ledger.
    Verify {
        chain: PathBuf,
    },
    /// Regenerate every CSV from a report.json.
    Emit {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        order: Order,
    },
    /// Write the scenario's response-time matrix and dataset as CSV.
    Export {
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(code) => code as i32,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code() as i32
        }
    }
}

pub fn execute(command: &Command) -> Result<ExitCode> {
    match command {
        Command::Simulate { scenario, estimator } => cmd_simulate(scenario, *estimator),
        Command::Valuate { scenario, estimator } => cmd_valuate(scenario, *estimator),
        Command::Shrink { scenario, estimator, order } => cmd_shrink(scenario, *estimator, *order),
        Command::Verify { chain } => cmd_verify(chain),
        Command::Emit { report, out, order } => cmd_emit(report, out, *order),
        Command::Export { scenario } => cmd_export(scenario),
    }
}

fn load(scenario: &ScenarioArgs, estimator: Option<Estimator>) -> Result<(ScenarioConfig, Overrides)> {
    let mut config = io::load_config(&scenario.config)?;
    if let Some(seed) = scenario.seed {
        config.master_seed = seed;
    }
    if let Some(e) = estimator {
        config.sv_estimator = e;
    }
    config.validate()?;
    let base = scenario.config.parent().unwrap_or(Path::new("."));
    let overrides = io::load_overrides(&config, base)?;
    Ok((config, overrides))
}

pub fn cmd_simulate(scenario: &ScenarioArgs, estimator: Option<Estimator>) -> Result<ExitCode> {
    let (config, overrides) = load(scenario, estimator)?;
    let outcome = run_block_with(&config, overrides, &Parallel::from_env())?;
    let out = &scenario.out;
    io::write_bytes(&out.join("report.json"), &io::json_bytes(&outcome.report)?)?;
    io::write_bytes(&out.join("chain.bin"), &outcome.primary_chain().to_bytes())?;
    io::write_bytes(&out.join("trace.jsonl"), &io::trace_jsonl(&outcome.trace)?)?;
    let r = &outcome.report;
    println!("pools formed: {}", r.pools.len());
    match r.winner {
        Some(w) => println!("winner: {} (median challenge accuracy {:?})", w.subchain, w.median_accuracy),
        None => println!("winner: none (no subchain reached verification)"),
    }
    println!("wrote {}", out.display());
    Ok(ExitCode::Ok)
}

fn write_valuation(out: &Path, report: &ShapleyReport) -> Result<()> {
    let name = report.estimator.name();
    io::write_bytes(&out.join(format!("shapley_{name}.csv")), &io::shapley_csv(report)?)?;
    io::write_bytes(&out.join(format!("histogram_{name}.csv")), &io::histogram_csv(report)?)?;
    io::write_bytes(&out.join(format!("scatter_{name}.csv")), &io::scatter_csv(report)?)
}

pub fn cmd_valuate(scenario: &ScenarioArgs, estimator: Option<Estimator>) -> Result<ExitCode> {
    let (config, overrides) = load(scenario, estimator)?;
    let prep = sim::prepare(&config, overrides, Trace::disabled())?;
    let pool = prep.demonstration_pool().clone();
    let report = valuate_pool(&prep, &pool, config.sv_estimator, &Parallel::from_env())?;
    write_valuation(&scenario.out, &report)?;
    println!("valued {} members of pool {} with {}", report.values.len(), pool.id, report.estimator.name());
    Ok(ExitCode::Ok)
}

pub fn cmd_shrink(scenario: &ScenarioArgs, estimator: Option<Estimator>, order: Order) -> Result<ExitCode> {
    let (config, overrides) = load(scenario, None)?;
    let estimators = match estimator {
        Some(e) => vec![e],
        None => config.estimators(),
    };
    let prep = sim::prepare(&config, overrides, Trace::disabled())?;
    let pool = prep.demonstration_pool().clone();
    let valuator = Parallel::from_env();
    for e in estimators {
        let report = valuate_pool(&prep, &pool, e, &valuator)?;
        let curve = shrink_curve(&prep, &pool, &report);
        io::write_bytes(&scenario.out.join(format!("shrink_{}.csv", e.name())), &io::shrink_csv(&curve, order.into())?)?;
        println!(
            "{}: dominance {:.2}, area descending {:.4} vs ascending {:.4}",
            e.name(),
            curve.dominance,
            curve.auc_descending,
            curve.auc_ascending
        );
    }
    Ok(ExitCode::Ok)
}

pub fn cmd_verify(path: &Path) -> Result<ExitCode> {
    let chain = io::read_chain(path)?;
    match verify_chain(&chain) {
        ChainStatus::Ok => {
            let report = type_one_check(&chain);
            println!("OK: {} sub-blocks, {} transactions", chain.len(), chain.transaction_count());
            for f in &report.findings {
                println!("finding: {f:?}");
            }
            Ok(ExitCode::Ok)
        }
        ChainStatus::Fail { index, reason } => {
            println!("FAIL at sub-block {index}: {reason:?}");
            Ok(ExitCode::ChainFail)
        }
    }
}

pub fn emit_from_report(report: &ScenarioReport, out: &Path, order: OrderColumns) -> Result<()> {
    for r in &report.shapley {
        write_valuation(out, r)?;
    }
    for c in &report.shrink {
        io::write_bytes(&out.join(format!("shrink_{}.csv", c.estimator.name())), &io::shrink_csv(c, order)?)?;
    }
    Ok(())
}

pub fn cmd_emit(report: &Path, out: &Path, order: Order) -> Result<ExitCode> {
    let report = io::read_report(report)?;
    emit_from_report(&report, out, order.into())?;
    println!("wrote {}", out.display());
    Ok(ExitCode::Ok)
}

pub fn cmd_export(scenario: &ScenarioArgs) -> Result<ExitCode> {
    let (config, overrides) = load(scenario, None)?;
    let prep = sim::prepare(&config, overrides, Trace::disabled())?;
    io::write_bytes(&scenario.out.join("response_matrix.csv"), &io::matrix_csv(prep.topology.matrix())?)?;
    io::write_bytes(&scenario.out.join("dataset.csv"), &io::dataset_csv(&prep.dataset)?)?;
    println!("wrote {}", scenario.out.display());
    Ok(ExitCode::Ok)
}
