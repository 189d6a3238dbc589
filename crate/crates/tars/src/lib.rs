// SPDX-License-Identifier: MIT OR Apache-2.0

//! Std companion of `tars-core`: the container format, artifact files,
//! pipeline configuration, command implementations and the CLI.

pub mod artifacts;
pub mod cli;
pub mod config;
pub mod container;
pub mod error;
pub mod pipeline;

pub use error::{CliError, CliResult};
