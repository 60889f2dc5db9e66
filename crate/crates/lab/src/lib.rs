//! Experiment harness: configuration, pretraining, staged post-training,
//! ablation grids and evaluation for conditional flow models on toy data.

pub mod ablate;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod posttrain;
pub mod pretrain;
pub mod run;
pub mod stats;

pub use config::RunConfig;
pub use error::{LabError, Result};
