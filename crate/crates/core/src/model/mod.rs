//! Dual-branch projection model: a small pre-norm Transformer per modality
//! with CLS pooling into a shared, l2-normalized space.

mod checkpoint;
mod params;
mod projection;

use serde::{Deserialize, Serialize};

use crate::encoders::AggregatorConfig;
use crate::{Error, Result};

pub use checkpoint::{read_checkpoint, read_checkpoint_from, write_checkpoint, write_checkpoint_to, CHECKPOINT_MAGIC};
pub use params::ParamStore;
pub use projection::{similarity_matrix, Branch, BoundModel, JointEmbedding, Model, SimilarityMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature size of the audio embedding records.
    pub audio_dim: usize,
    /// Hidden-state layers per audio record.
    pub audio_layers: usize,
    /// Feature size of the text encoder output.
    pub text_dim: usize,
    pub d_model: usize,
    pub d_joint: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub ff_mult: usize,
    /// Longest sequence including the CLS position.
    pub max_len: usize,
    /// Drop trailing positions instead of failing on long inputs.
    pub truncate: bool,
    pub aggregator: AggregatorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            audio_dim: 64,
            audio_layers: 1,
            text_dim: 64,
            d_model: 256,
            d_joint: 256,
            n_heads: 2,
            n_layers: 2,
            ff_mult: 4,
            max_len: 512,
            truncate: false,
            aggregator: AggregatorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("model.{field}"), msg))
            }
        };
        check(self.audio_dim >= 1, "audio_dim", "must be >= 1")?;
        check(self.audio_layers >= 1, "audio_layers", "must be >= 1")?;
        check(self.text_dim >= 1, "text_dim", "must be >= 1")?;
        check(self.d_model >= 1, "d_model", "must be >= 1")?;
        check(self.d_joint >= 1, "d_joint", "must be >= 1")?;
        check(self.n_heads >= 1, "n_heads", "must be >= 1")?;
        check(self.d_model.is_multiple_of(self.n_heads.max(1)), "n_heads", "must divide d_model")?;
        check(self.ff_mult >= 1, "ff_mult", "must be >= 1")?;
        check(self.max_len >= 2, "max_len", "must be >= 2")?;
        check(self.aggregator.kernel_width % 2 == 1, "aggregator.kernel_width", "must be odd")?;
        check(self.aggregator.out_channels >= 1, "aggregator.out_channels", "must be >= 1")?;
        Ok(())
    }
}
