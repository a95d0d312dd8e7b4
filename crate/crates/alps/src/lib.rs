//! Command-line front end and file formats for [`alps_core`].

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
