//! Product retrieval with taxonomy-based hard-negative sampling.
//!
//! The crate covers the full offline loop: catalog and taxonomy ingest,
//! negative samplers (taxonomy, random, BM25-pool, ANCE-style), a toy
//! two-tower encoder trained with a multiple-negatives ranking loss,
//! exact/IVF inner-product retrieval, and Recall@K evaluation with query
//! segmentation and paired significance tests.

pub mod ann;
pub mod catalog;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod lexical;
pub mod sampling;
pub mod synth;
pub mod text;
pub mod training;

pub use error::{Error, Result};
