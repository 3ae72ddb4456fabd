//! Scenario files, batch runs and artifact export for `autotaxi`.
//!
//! The `autotaxi` binary is a thin wrapper over [`commands`].

pub mod artifacts;
pub mod commands;
pub mod error;
pub mod file;

pub use commands::{cmd_compare, cmd_plot_data, cmd_run, cmd_validate};
pub use error::{CliError, Result};
pub use file::{load_scenario, scenario_to_toml, write_scenario, Overrides, ScenarioFile};

// Book chapters on files and the command line, compiled as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/scenario_files.md")]
    mod scenario_files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/artifacts.md")]
    mod artifacts {}
}
