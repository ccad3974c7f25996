//! Command-line harness and annotation service around `iie_core`.

pub mod commands;
pub mod error;
pub mod http;
pub mod service;

pub use error::{HarnessError, Result};
