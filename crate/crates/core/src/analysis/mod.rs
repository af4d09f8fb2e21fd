//! Post-hoc analyses: cross-modal retrieval, the shared-features-only probe,
//! and the exact information-gap oracle.

pub mod info;
pub mod probe;
pub mod retrieval;

pub use info::{alignment_gap_experiment, mutual_information, InfoGapReport};
pub use probe::{shared_only_probe, ProbeSettings};
pub use retrieval::{retrieval_recall_at_k, retrieval_report, BankPart, FeatureBank, RetrievalRow};
