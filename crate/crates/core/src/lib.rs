//! Myocardial-infarction classification from raw multi-channel ECG.
//!
//! The pipeline reads WFDB records, selects and labels them, draws random
//! fixed-length windows, trains small 1D convolutional or recurrent networks
//! with a built-in reverse-mode differentiation engine, evaluates them with
//! patient-level cross-validation and explains decisions with per-channel
//! attribution maps.

pub mod attribution;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod models;
pub mod synth;
pub mod training;
pub mod wfdb;
pub mod windowing;

pub use error::{Error, Result};
