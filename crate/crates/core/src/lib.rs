//! Music-text contrastive training at desk scale.
//!
//! The crate covers the whole recipe: a tagged corpus model with a synthetic
//! generator, the augment/drop/swap text pipeline, a small reverse-mode
//! autodiff engine, frozen-encoder adapters, the per-branch Transformer
//! projection, InfoNCE training with AdamW, and subset-normalized
//! text-to-audio retrieval evaluation.
//!
//! Data-parallel loops (evaluation, inference projection, augmentation,
//! gradient checks) go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise.

pub mod corpus;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod par;
pub mod rng;
pub mod tensor;
pub mod textaug;
pub mod train;

pub use error::{Error, Result};
