//! Synthetic domains, file formats, experiment orchestration and the CLI.

pub mod cli;
pub mod config;
pub mod domains;
pub mod experiment;
pub mod formats;
