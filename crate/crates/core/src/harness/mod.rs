//! Optimization, training with model selection, and the DG protocols.

pub mod config;
pub mod optim;
pub mod protocol;
pub mod train;

pub use config::{Arrangement, ExperimentConfig, ModelShape, Protocol};
pub use protocol::{run_arrangement, run_protocol, ProtocolReport, ResultRow, RunRecord};
pub use train::{evaluate, train, train_on, EpochRecord, Metrics, SourceData};
