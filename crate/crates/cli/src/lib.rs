//! Command-line front end: run configuration, subcommand dispatch and run
//! manifests.

pub mod cli;
pub mod config;
pub mod run;

pub use cli::Cli;
pub use config::{parse_config, parse_config_str, RunConfig, SchemaError};
pub use run::{dispatch, rerun, Command, RunManifest, RunOutcome};
