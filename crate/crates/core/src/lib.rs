//! Multi-channel time-domain speech enhancement toolkit.
//!
//! Implements a multi-channel Conv-TasNet enhancer trained with channel
//! rotation, MVDR beamforming driven by its output (signal-based and
//! mask-based covariance estimation), TBPTT-based joint training with
//! multi-condition loss routing, plus a synthetic mixture simulator and a
//! signal-level metric suite.

pub mod beamform;
pub mod checkpoint;
pub mod diffnet;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod simkit;
pub mod tasnet;
pub mod trainer;

pub use error::{Error, Result};
