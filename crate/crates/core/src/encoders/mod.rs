//! Frozen-encoder adapters: the MMEB embedding file format, the learnable
//! layer aggregator, and text encoders.

mod aggregator;
mod mmeb;
mod text;

pub use aggregator::{aggregate_layers, AggregatorConfig, AggregatorParams};
pub use mmeb::{read_embeddings, write_embeddings, write_mmeb, EmbeddingRecord, MmebReader, MMEB_MAGIC, MMEB_VERSION};
pub use text::{tokenize, FileTextEncoder, TextEncoder, ToyTextEncoder};
