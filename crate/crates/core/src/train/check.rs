use rand::Rng as _;

use super::{apply_hard_negatives, info_nce_split};
use crate::encoders::{AggregatorConfig, EmbeddingRecord};
use crate::model::{Model, ModelConfig, ParamStore};
use crate::par::ExecMode;
use crate::rng::SeedPath;
use crate::tensor::{grad_check_many, PrimitiveCheck, Tensor};
use crate::Result;

/// Finite-difference check of the whole training objective: layer
/// aggregation, both projection branches, a hard-negative substitution and
/// symmetric InfoNCE, differentiated with respect to every model parameter.
pub fn composite_grad_check(seed: u64, tau: f64, mode: ExecMode) -> Result<PrimitiveCheck> {
    let config = ModelConfig {
        audio_dim: 3,
        audio_layers: 2,
        text_dim: 4,
        d_model: 8,
        d_joint: 6,
        n_heads: 2,
        n_layers: 1,
        ff_mult: 2,
        max_len: 8,
        truncate: false,
        aggregator: AggregatorConfig {
            kernel_width: 3,
            out_channels: 2,
        },
    };
    let seeds = SeedPath::new(seed).label("composite");
    let mut rng = seeds.label("data").rng();
    let mut uniform = |n: usize, scale: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(-scale..scale)).collect() };

    // perturb the structured initialization (zero biases, unit gains)
    let base = Model::init(config.clone(), seed)?;
    let mut params = ParamStore::new();
    for (name, t) in base.params.iter() {
        let data: Vec<f64> = t.data().iter().zip(uniform(t.numel(), 0.1)).map(|(a, b)| a + b).collect();
        params.push(name, Tensor::new(t.shape().to_vec(), data)?)?;
    }
    let model = base.with_params(params)?;

    let records = (0..3)
        .map(|i| {
            let values = uniform(2 * 3 * 3, 1.0).into_iter().map(|x| x as f32).collect();
            EmbeddingRecord::new(format!("a{i}"), 2, 3, 3, values)
        })
        .collect::<Result<Vec<_>>>()?;
    let texts = [2usize, 3, 4]
        .iter()
        .map(|&len| Tensor::new(vec![len, 4], uniform(len * 4, 1.0)))
        .collect::<Result<Vec<_>>>()?;
    let swapped = Tensor::new(vec![3, 4], uniform(12, 1.0))?;

    let f = |g: &mut crate::tensor::Graph, vars: &[crate::tensor::Var]| {
        let bound = model.bind_vars(vars.to_vec())?;
        let mut a = Vec::new();
        let mut t = Vec::new();
        for (rec, seq) in records.iter().zip(&texts) {
            a.push(bound.project_audio(g, rec)?);
            t.push(bound.project_text(g, seq)?);
        }
        let hard = bound.project_text(g, &swapped)?;
        let audio = g.concat(&a, 0)?;
        let text = g.concat(&t, 0)?;
        let rows = apply_hard_negatives(g, audio, text, &[vec![(1, hard)], vec![], vec![]])?;
        let tt = g.transpose(text)?;
        let cols = g.matmul(audio, tt)?;
        info_nce_split(g, rows, cols, tau)
    };
    let err = grad_check_many(f, model.params.tensors(), 1e-5, mode)?;
    Ok(PrimitiveCheck {
        name: "project_info_nce",
        max_rel_error: err,
        tolerance: 1e-4,
    })
}
