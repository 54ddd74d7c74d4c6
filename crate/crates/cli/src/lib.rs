//! Command-line front end for hessianscope: subcommands wrapping the library
//! and canned recipes that run whole experiments into one output directory.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod recipes;

pub use error::{CliError, CliResult};
