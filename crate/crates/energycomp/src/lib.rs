//! Runs training and compression experiments for the models in
//! [`energycomp_core`], meters their energy and writes models, records and
//! reports to disk.

pub mod config;
pub mod dataset;
mod error;
pub mod formats;
pub mod harness;
pub mod meter;

pub use energycomp_core as core;
pub use error::{Error, Result};
