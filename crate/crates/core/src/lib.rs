//! Offline batch-constrained Q-learning for sequential treatment decisions.

pub mod bcq;
pub mod cohort;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod grids;
pub mod nn;
pub mod ope;
pub mod rewards;
pub mod sim;
pub mod transfer;

pub use error::{Error, Result};
