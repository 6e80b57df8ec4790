//! Federated training with per-client sparse masks.
//!
//! Clients train a small convolutional regressor on their own data silo,
//! prune it by weight magnitude on a recovery-gated schedule, and exchange
//! only surviving weights with a server that averages each weight over the
//! clients still holding it.

pub mod comms;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod nn;
pub mod pruning;
pub mod schedule;

pub use config::{DataSource, ExperimentConfig, Method};
pub use error::{Error, Result};
pub use federation::{run_experiment, ExperimentResult};
