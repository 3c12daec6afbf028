use serde::{Deserialize, Serialize};

use super::params::{constant, uniform};
use super::{ModelConfig, ParamStore};
use crate::encoders::{AggregatorParams, EmbeddingRecord};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Audio,
    Text,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Audio => "audio",
            Branch::Text => "text",
        }
    }
}

#[derive(Debug, Clone)]
struct LayerLayout {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct BranchLayout {
    w_in: usize,
    b_in: usize,
    cls: usize,
    pos: usize,
    layers: Vec<LayerLayout>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

/// Aggregator plus one projection Transformer per branch, all parameters in
/// one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    agg_w: usize,
    agg_b: usize,
    audio: BranchLayout,
    text: BranchLayout,
}

fn add_branch(store: &mut ParamStore, cfg: &ModelConfig, branch: Branch, input_dim: usize, seed: u64) -> Result<BranchLayout> {
    let p = branch.prefix();
    let dm = cfg.d_model;
    let dff = dm * cfg.ff_mult;
    let linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<(usize, usize)> {
        let wn = format!("{p}.{name}.weight");
        let bn = format!("{p}.{name}.bias");
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.push(&wn, uniform(seed, &wn, &[fan_in, fan_out], bound))?;
        let b = store.push(&bn, constant(&[fan_out], 0.0))?;
        Ok((w, b))
    };
    let (w_in, b_in) = linear(store, "input", input_dim, dm)?;
    let emb_bound = 1.0 / (dm as f64).sqrt();
    let cls_name = format!("{p}.cls");
    let cls = store.push(&cls_name, uniform(seed, &cls_name, &[1, dm], emb_bound))?;
    let pos_name = format!("{p}.pos");
    let pos = store.push(&pos_name, uniform(seed, &pos_name, &[cfg.max_len, dm], emb_bound))?;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let ln = |store: &mut ParamStore, name: &str| -> Result<(usize, usize)> {
            let g = store.push(format!("{p}.layer{l}.{name}.gain"), constant(&[dm], 1.0))?;
            let b = store.push(format!("{p}.layer{l}.{name}.bias"), constant(&[dm], 0.0))?;
            Ok((g, b))
        };
        let (ln1_g, ln1_b) = ln(store, "ln1")?;
        let (wq, bq) = linear(store, &format!("layer{l}.attn.q"), dm, dm)?;
        let (wk, bk) = linear(store, &format!("layer{l}.attn.k"), dm, dm)?;
        let (wv, bv) = linear(store, &format!("layer{l}.attn.v"), dm, dm)?;
        let (wo, bo) = linear(store, &format!("layer{l}.attn.out"), dm, dm)?;
        let (ln2_g, ln2_b) = ln(store, "ln2")?;
        let (w1, b1) = linear(store, &format!("layer{l}.ff.up"), dm, dff)?;
        let (w2, b2) = linear(store, &format!("layer{l}.ff.down"), dff, dm)?;
        layers.push(LayerLayout {
            ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2,
        });
    }
    let lnf_g = store.push(format!("{p}.final_ln.gain"), constant(&[dm], 1.0))?;
    let lnf_b = store.push(format!("{p}.final_ln.bias"), constant(&[dm], 0.0))?;
    let (w_out, b_out) = linear(store, "output", dm, cfg.d_joint)?;
    Ok(BranchLayout {
        w_in, b_in, cls, pos, layers, lnf_g, lnf_b, w_out, b_out,
    })
}

impl Model {
    /// Deterministic initialization: linear weights uniform in
    /// `±1/sqrt(fan_in)`, zero biases, unit layer-norm gains, and an
    /// aggregator that starts as the layer mean.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        let agg = AggregatorParams::init(config.audio_layers, config.aggregator)?;
        let agg_w = params.push("aggregator.weight", agg.weight)?;
        let agg_b = params.push("aggregator.bias", agg.bias)?;
        let audio_in = config.aggregator.out_channels * config.audio_dim;
        let audio = add_branch(&mut params, &config, Branch::Audio, audio_in, seed)?;
        let text = add_branch(&mut params, &config, Branch::Text, config.text_dim, seed)?;
        Ok(Model {
            config,
            params,
            agg_w,
            agg_b,
            audio,
            text,
        })
    }

    /// Replace all parameters, e.g. from a checkpoint. Names and shapes must
    /// match this model's layout.
    pub fn with_params(mut self, params: ParamStore) -> Result<Model> {
        if !self.params.same_layout(&params) {
            return Err(Error::InvalidArgument(
                "checkpoint parameters do not match the model configuration".into(),
            ));
        }
        self.params = params;
        Ok(self)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    pub fn aggregator(&self) -> AggregatorParams {
        AggregatorParams {
            weight: self.params.tensors()[self.agg_w].clone(),
            bias: self.params.tensors()[self.agg_b].clone(),
        }
    }

    /// Register every parameter as a leaf of `g`.
    pub fn bind<'m>(&'m self, g: &mut Graph, trainable: bool) -> BoundModel<'m> {
        let vars = self
            .params
            .tensors()
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        BoundModel { model: self, vars }
    }

    /// Bind to variables already in a graph, one per parameter in store
    /// order, e.g. the inputs of a gradient check.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundModel<'_>> {
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        Ok(BoundModel { model: self, vars })
    }

    /// Inference-only audio embedding.
    pub fn embed_audio(&self, record: &EmbeddingRecord) -> Result<JointEmbedding> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let y = bound.project_audio(&mut g, record)?;
        Ok(JointEmbedding(g.value(y).to_vec()))
    }

    /// Inference-only text embedding from an encoded `T x text_dim` sequence.
    pub fn embed_text(&self, sequence: &Tensor) -> Result<JointEmbedding> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let y = bound.project_text(&mut g, sequence)?;
        Ok(JointEmbedding(g.value(y).to_vec()))
    }
}

/// A model whose parameters live in a particular graph.
pub struct BoundModel<'m> {
    model: &'m Model,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn v(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Aggregate a record's layers, then project. Returns `[1, d_joint]`.
    pub fn project_audio(&self, g: &mut Graph, record: &EmbeddingRecord) -> Result<Var> {
        let cfg = &self.model.config;
        if record.dim != cfg.audio_dim {
            return Err(Error::shape(
                "project_audio",
                format!("record '{}' has dim {}, model expects {}", record.id, record.dim, cfg.audio_dim),
            ));
        }
        let x = g.constant(record.to_tensor());
        let agg = self.model.aggregator();
        let seq = agg.apply(g, x, self.v(self.model.agg_w), self.v(self.model.agg_b))?;
        self.project(g, Branch::Audio, seq)
    }

    /// Project an encoded text sequence. Returns `[1, d_joint]`.
    pub fn project_text(&self, g: &mut Graph, sequence: &Tensor) -> Result<Var> {
        let seq = g.constant(sequence.clone());
        self.project(g, Branch::Text, seq)
    }

    /// Prepend CLS, add positions, run the pre-norm layers, pool position 0,
    /// project and l2-normalize.
    pub fn project(&self, g: &mut Graph, branch: Branch, seq: Var) -> Result<Var> {
        let cfg = &self.model.config;
        let lay = match branch {
            Branch::Audio => &self.model.audio,
            Branch::Text => &self.model.text,
        };
        let (mut t, _) = g
            .value(seq)
            .dims2()
            .ok_or_else(|| Error::shape("project", format!("sequence must be rank 2, got {:?}", g.value(seq).shape())))?;
        if t == 0 {
            return Err(Error::shape("project", "empty sequence"));
        }
        let mut seq = seq;
        if t + 1 > cfg.max_len {
            if !cfg.truncate {
                return Err(Error::InvalidArgument(format!(
                    "{} sequence of length {t} exceeds max_len {} (CLS included)",
                    branch.prefix(),
                    cfg.max_len
                )));
            }
            t = cfg.max_len - 1;
            seq = g.slice(seq, 0, 0, t)?;
        }

        let h = g.matmul(seq, self.v(lay.w_in))?;
        let h = g.add(h, self.v(lay.b_in))?;
        let x = g.concat(&[self.v(lay.cls), h], 0)?;
        let pos = g.slice(self.v(lay.pos), 0, 0, t + 1)?;
        let mut x = g.add(x, pos)?;

        let heads = cfg.n_heads;
        let dh = cfg.d_model / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        for l in &lay.layers {
            let a = self.affine_norm(g, x, l.ln1_g, l.ln1_b)?;
            let q = self.linear(g, a, l.wq, l.bq)?;
            let k = self.linear(g, a, l.wk, l.bk)?;
            let v = self.linear(g, a, l.wv, l.bv)?;
            let mut outs = Vec::with_capacity(heads);
            for hd in 0..heads {
                let (s, e) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice(q, 1, s, e)?;
                let kh = g.slice(k, 1, s, e)?;
                let vh = g.slice(v, 1, s, e)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, inv_sqrt);
                let p = g.softmax(scores)?;
                outs.push(g.matmul(p, vh)?);
            }
            let o = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
            let o = self.linear(g, o, l.wo, l.bo)?;
            x = g.add(x, o)?;

            let a = self.affine_norm(g, x, l.ln2_g, l.ln2_b)?;
            let f = self.linear(g, a, l.w1, l.b1)?;
            let f = g.gelu(f);
            let f = self.linear(g, f, l.w2, l.b2)?;
            x = g.add(x, f)?;
        }
        let c = g.slice(x, 0, 0, 1)?;
        let c = self.affine_norm(g, c, lay.lnf_g, lay.lnf_b)?;
        let out = self.linear(g, c, lay.w_out, lay.b_out)?;
        g.l2_normalize(out)
    }

    fn linear(&self, g: &mut Graph, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = g.matmul(x, self.v(w))?;
        g.add(y, self.v(b))
    }

    fn affine_norm(&self, g: &mut Graph, x: Var, gain: usize, bias: usize) -> Result<Var> {
        let n = g.layer_norm(x)?;
        let n = g.mul(n, self.v(gain))?;
        g.add(n, self.v(bias))
    }
}

/// A unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEmbedding(pub Vec<f64>);

impl JointEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &JointEmbedding) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Row-major `N x N` similarity scores between audio (rows) and text (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.n, self.n], self.data.clone()).expect("square")
    }
}

/// `S[i][j] = audio_i . text_j` for unit-norm embeddings.
pub fn similarity_matrix(audio: &[JointEmbedding], text: &[JointEmbedding]) -> Result<SimilarityMatrix> {
    if audio.len() != text.len() {
        return Err(Error::InvalidArgument(format!(
            "similarity_matrix: {} audio vs {} text embeddings",
            audio.len(),
            text.len()
        )));
    }
    let n = audio.len();
    let mut data = Vec::with_capacity(n * n);
    for a in audio {
        for t in text {
            if a.0.len() != t.0.len() {
                return Err(Error::shape("similarity_matrix", format!("[{}] x [{}]", a.0.len(), t.0.len())));
            }
            data.push(a.dot(t));
        }
    }
    Ok(SimilarityMatrix { n, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::par::ExecMode;
    use crate::rng::rng_from_seed;
    use crate::tensor::grad_check_many;
    use rand::Rng as _;

    fn small() -> ModelConfig {
        ModelConfig {
            audio_dim: 6,
            audio_layers: 2,
            text_dim: 5,
            d_model: 8,
            d_joint: 4,
            max_len: 8,
            ..ModelConfig::default()
        }
    }

    fn random_seq(seed: u64, t: usize, d: usize) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![t, d], (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_is_unit_norm_at_default_size() {
        let cfg = ModelConfig {
            text_dim: 16,
            ..ModelConfig::default()
        };
        let m = Model::init(cfg, 0).unwrap();
        for s in 0..3 {
            let e = m.embed_text(&random_seq(s, 4, 16)).unwrap();
            assert_eq!(e.0.len(), 256);
            assert!((e.norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn too_long_sequences_fail_unless_truncating() {
        let m = Model::init(small(), 0).unwrap();
        let seq = random_seq(0, 8, 5);
        assert!(m.embed_text(&seq).is_err());
        let mut cfg = small();
        cfg.truncate = true;
        let m = Model::init(cfg, 0).unwrap();
        let full = m.embed_text(&seq).unwrap();
        let head = Tensor::new(vec![7, 5], seq.data()[..35].to_vec()).unwrap();
        assert_eq!(full, m.embed_text(&head).unwrap());
    }

    #[test]
    fn frame_order_matters_through_positions() {
        let m = Model::init(small(), 1).unwrap();
        let seq = random_seq(3, 4, 5);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|i| seq.row(i).to_vec()).collect();
        rows.swap(1, 3);
        let perm = Tensor::from_rows(&rows).unwrap();
        let a = m.embed_text(&seq).unwrap();
        let b = m.embed_text(&perm).unwrap();
        assert!(a.0.iter().zip(&b.0).any(|(x, y)| (x - y).abs() > 1e-9));

        // without positional information attention pooling is permutation invariant
        let mut params = m.params.clone();
        let pos = params.position("text.pos").unwrap();
        let zeros = Tensor::zeros(params.tensors()[pos].shape().to_vec());
        params.set(pos, zeros).unwrap();
        let m0 = m.clone().with_params(params).unwrap();
        let a = m0.embed_text(&seq).unwrap();
        let b = m0.embed_text(&perm).unwrap();
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn init_is_deterministic_and_counted() {
        let a = Model::init(small(), 5).unwrap();
        let b = Model::init(small(), 5).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, Model::init(small(), 6).unwrap().params);

        let cfg = ModelConfig::default();
        let m = Model::init(cfg.clone(), 0).unwrap();
        let dm = cfg.d_model;
        let branch = |din: usize| {
            din * dm + dm + dm + cfg.max_len * dm
                + cfg.n_layers * (4 * dm + 4 * (dm * dm + dm) + (dm * 4 * dm + 4 * dm) + (4 * dm * dm + dm))
                + 2 * dm
                + dm * cfg.d_joint
                + cfg.d_joint
        };
        let expected = cfg.audio_layers + 1 + branch(64) + branch(64);
        assert_eq!(m.parameter_count(), expected);
        assert_eq!(expected, 3_587_586);
    }

    #[test]
    fn activations_stay_finite_at_init() {
        let m = Model::init(ModelConfig { text_dim: 16, ..ModelConfig::default() }, 2).unwrap();
        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let big = random_seq(9, 30, 16).map(|x| 50.0 * x);
        let y = bound.project_text(&mut g, &big).unwrap();
        assert!(g.value(y).all_finite());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn similarity_matrix_oracle() {
        let mut rng = rng_from_seed(1);
        let unit = |rng: &mut crate::rng::Rng| {
            let v: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            JointEmbedding(v.into_iter().map(|x| x / n).collect())
        };
        let a: Vec<_> = (0..8).map(|_| unit(&mut rng)).collect();
        let t: Vec<_> = (0..8).map(|_| unit(&mut rng)).collect();
        let s = similarity_matrix(&a, &t).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                let (x, y) = (&a[i].0, &t[j].0);
                let cos = x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()
                    / (x.iter().map(|p| p * p).sum::<f64>().sqrt() * y.iter().map(|q| q * q).sum::<f64>().sqrt());
                assert!((s.at(i, j) - cos).abs() < 1e-12);
                assert!(s.at(i, j).abs() <= 1.0 + 1e-12);
            }
        }
        let st = similarity_matrix(&t, &a).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(s.at(i, j), st.at(j, i));
            }
        }
        let self_sim = similarity_matrix(&a, &a).unwrap();
        for i in 0..8 {
            assert!((self_sim.at(i, i) - 1.0).abs() < 1e-12);
        }
        let e = JointEmbedding(vec![1.0, 0.0]);
        let f = JointEmbedding(vec![0.0, 1.0]);
        assert_eq!(similarity_matrix(std::slice::from_ref(&e), &[f]).unwrap().at(0, 0), 0.0);
        assert!(similarity_matrix(std::slice::from_ref(&e), &[]).is_err());
    }

    #[test]
    fn projection_gradient_check() {
        let m = Model::init(small(), 3).unwrap();
        let seq = random_seq(4, 3, 5);
        let target = random_seq(5, 1, 4);
        let err = grad_check_many(
            |g, vars| {
                let bound = BoundModel { model: &m, vars: vars.to_vec() };
                let y = bound.project_text(g, &seq)?;
                let t = g.constant(target.clone());
                let p = g.mul(y, t)?;
                Ok(g.mean(p))
            },
            m.params.tensors(),
            1e-5,
            ExecMode::Parallel,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }
}
