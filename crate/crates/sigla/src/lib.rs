//! File formats, configuration loading and reporting around `sigla-core`.

pub mod config;
pub mod dataset_io;
pub mod error;
pub mod model_io;
pub mod report;

pub use error::{Error, Result};
pub use sigla_core as core;
