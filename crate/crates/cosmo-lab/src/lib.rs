//! Desk-scale laboratory for false-negative handling in contrastive
//! image-text training.
//!
//! The crate wires together a synthetic many-to-many dataset with planted
//! ground-truth connections, toy dual encoders with hand-derived gradients,
//! every target-distribution variant used by smoothed / distilled / corrected
//! contrastive objectives, grouped mini-batch (GRIT) scheduling, efficient
//! connection mining (ECM), and a training + evaluation harness. Because the
//! dataset's latent concepts are known exactly, every claimed mechanism —
//! false-negative counts, label conversions, soft-label shapes, retrieval
//! quality — is measurable against an oracle.

pub mod cli;
pub mod ecm;
pub mod encoder;
pub mod error;
pub mod gritsampler;
pub mod harness;
pub mod labelkit;
pub mod losses;
pub mod synthdata;

pub use error::{Error, Result};
