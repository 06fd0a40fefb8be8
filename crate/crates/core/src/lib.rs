//! Regime-change detection and epoch-level inference for engagement-count panels.

pub mod ar1;
pub mod changepoint;
pub mod epoch;
pub mod error;
pub mod family;
pub mod formula;
pub mod frame;
pub mod glmm;
pub mod inference;
pub mod ingest;
pub mod jet;
pub mod linalg;
pub mod ols;
pub mod registry;
pub mod signal;
pub mod special;
pub mod synthetic;

pub use error::{Error, Result};
