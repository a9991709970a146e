#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

//! Library half of the `cglb` command-line tool.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use config::Config;
pub use error::CliError;
