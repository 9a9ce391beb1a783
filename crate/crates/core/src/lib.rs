//! Conformal prediction with a query oracle.
//!
//! Inputs are answered by a black-box sampler; each input is queried
//! adaptively until the estimated reduction in missing mass per extra query
//! falls below a tuned threshold, and prediction sets are calibrated with an
//! abstract "everything else" (EE) label that stands for every label not yet
//! sampled.

pub mod conformal;
pub mod distributions;
pub mod error;
pub mod estimators;
pub mod experiments;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod tally;

pub use error::{CpqError, Result};

/// Opaque label (cluster) id.
pub type Label = u64;
