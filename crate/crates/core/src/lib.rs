//! Tabular sandbox for comparing knowledge-distillation objectives under a
//! single reweighted log-likelihood gradient.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};

/// Version written into every file the crate produces.
pub const FORMAT_VERSION: u32 = 1;

/// Run identity recorded in output files.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FileStamp {
    pub config_hash: String,
    pub seed: u64,
}
