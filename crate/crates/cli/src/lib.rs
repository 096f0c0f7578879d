//! Command-line front end for diaruq: tensor containers, TOML configuration
//! and the subcommand implementations behind the `diaruq` binary.

pub mod commands;
pub mod config;
pub mod container;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod svg;

pub use error::{CliError, CliResult};
