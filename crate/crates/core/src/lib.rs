//! Zero-shot cross-domain retrieval learning.
//!
//! A shared-weight encoder is trained on seen classes with a domain-aware
//! quadruplet loss, a semantic classification loss and a knowledge
//! preservation loss against class-level teacher soft labels. Retrieval on
//! unseen classes is scored with P@K, AP@K and mAP.

pub mod data;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalrank;
pub mod experiment;
pub mod losses;
pub mod ndcore;
pub mod trainer;

pub use error::{Error, Result};
