//! Neural controlled differential equation trunks, LSTM baselines and
//! causally masked attention fusion for irregularly sampled longitudinal
//! data, with the data pipeline and experiment harness around them.

pub mod ablation;
pub mod autodiff;
pub mod cde;
pub mod data;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod lstm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod path;
pub mod rng;
pub mod train;

pub use error::{Error, Result};
