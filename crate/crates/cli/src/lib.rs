//! Command line front end and HTTP service for topoforge.

pub mod args;
pub mod commands;
pub mod error;
pub mod raster;
pub mod server;

pub use error::CliError;
