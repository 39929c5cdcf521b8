//! Unsupervised cross-domain vehicle re-identification.
//!
//! The pipeline translates labeled source-domain images into the target
//! domain's style with a dual-branch adversarial network ([`dan`]), trains an
//! attention-based identification + verification feature learner on the
//! translated images ([`attnet`]), and scores retrieval with mAP and CMC
//! ([`metrics`]). [`data`] covers corpora and the synthetic two-domain
//! generator, [`train`] the training loops and checkpoints.

pub mod attnet;
pub mod dan;
pub mod data;
pub mod embedding;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod train;

pub use error::{Error, Result};
