//! Analytical step-time, memory and throughput model for training dense and
//! mixture-of-experts language models on parameterized clusters, with an
//! exhaustive strategy search on top.

pub mod error;
pub mod hardware;
pub mod memcap;
pub mod model;
pub mod report;
pub mod schedule;
pub mod search;
pub mod strategy;
pub mod sweep;
pub mod topology;

pub use error::{Error, Result};
pub use hardware::{Precision, SystemSpec, Topology};
pub use model::ModelSpec;
pub use schedule::{estimate, RunEstimate};
pub use strategy::Strategy;
