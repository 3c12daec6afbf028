use serde::{Deserialize, Serialize};

use super::EmbeddingRecord;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorConfig {
    /// Kernel width along the feature axis; odd.
    pub kernel_width: usize,
    /// Output channels; the aggregated frame has `out_channels * D` features.
    pub out_channels: usize,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kernel_width: 1,
            out_channels: 1,
        }
    }
}

/// Learnable convolution across the layer axis of a frozen encoder's
/// hidden-state stack.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    /// `[out_channels, layers, kernel_width]`
    pub weight: Tensor,
    /// `[out_channels]`
    pub bias: Tensor,
}

impl AggregatorParams {
    /// Starts as the plain layer mean: weight `1/L` at the kernel centre.
    pub fn init(layers: usize, cfg: AggregatorConfig) -> Result<AggregatorParams> {
        if layers == 0 || cfg.kernel_width.is_multiple_of(2) || cfg.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "aggregator needs layers >= 1, odd kernel width and >= 1 channel (got {layers}, {cfg:?})"
            )));
        }
        let k = cfg.kernel_width;
        let mut w = vec![0.0; cfg.out_channels * layers * k];
        for c in 0..cfg.out_channels {
            for l in 0..layers {
                w[(c * layers + l) * k + k / 2] = 1.0 / layers as f64;
            }
        }
        Ok(AggregatorParams {
            weight: Tensor::new(vec![cfg.out_channels, layers, k], w)?,
            bias: Tensor::zeros(vec![cfg.out_channels]),
        })
    }

    pub fn layers(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        self.weight.shape()[0] * input_dim
    }

    /// Apply inside a graph; `input` holds a `[L, F, D]` stack.
    pub fn apply(&self, g: &mut Graph, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let l = g.value(input).shape().first().copied().unwrap_or(0);
        if l != self.layers() {
            return Err(Error::InvalidArgument(format!(
                "aggregator kernel covers {} layers but the record has {l}",
                self.layers()
            )));
        }
        g.conv1d(input, weight, bias)
    }
}

/// Aggregate a record to an `F x D'` sequence without tracking gradients.
pub fn aggregate_layers(record: &EmbeddingRecord, params: &AggregatorParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(record.to_tensor());
    let w = g.constant(params.weight.clone());
    let b = g.constant(params.bias.clone());
    let y = params.apply(&mut g, x, w, b)?;
    Ok(g.value(y).clone())
}
