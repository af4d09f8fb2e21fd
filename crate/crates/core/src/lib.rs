//! Multi-modal domain generalization with split shared/specific embeddings.
//!
//! Each modality is encoded into an embedding whose first half is trained to
//! align across modalities (supervised contrastive loss) and whose second half
//! is pushed away from the first (distance loss). Per-pair translators map one
//! modality's embedding to another's, regularizing training and imputing
//! missing modalities at test time.

pub mod analysis;
pub mod cli;
pub mod diffcalc;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod model;
pub mod synthgen;

pub use error::{Error, Result};
