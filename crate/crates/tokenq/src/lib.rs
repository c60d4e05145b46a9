//! Command-line front end and file formats for the `tokenq-core` models.
//!
//! Library users can call the subcommands directly through [`commands`], or
//! hand an argument list to [`cli::run`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod parallel;

pub use error::{CliError, Result};
