//! Configuration, checkpoints, metrics and the command implementations
//! behind the `crl` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod gradcheck;
pub mod metrics;

pub use checkpoint::Checkpoint;
pub use commands::*;
pub use config::{RunConfig, Variant, ENV_PREFIX};
pub use metrics::{read_metrics, silhouette, wilson_interval, MetricsWriter};
