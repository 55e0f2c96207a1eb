//! Files, formats and the command-line front end of the PoFLSC simulator.
//!
//! The simulation itself lives in `poflsc-core`; this crate reads scenario
//! configs (TOML or JSON), IDX datasets and pinned response-time matrices,
//! writes reports, ledgers, traces and figure data, and spreads Monte Carlo
//! valuation over threads.

pub mod cli;
pub mod error;
pub mod io;
pub mod parallel;

pub use error::{CliError, ExitCode};
