//! Joint image-document embedding for zero-shot image classification.
//!
//! The pipeline trains a dual-stream model against per-class text documents:
//! a global compatibility head scores images against document CLS embeddings,
//! and a cross-modal attention head aligns image patches with document words.
//! Classification of unseen classes uses the learned document embeddings as
//! semantic class vectors, with calibrated stacking for the generalized
//! setting and attention-based attribution exports for inspection.

pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod explain;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wordvec;

pub use error::{Error, Result};
