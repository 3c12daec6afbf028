use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use rand_distr::{Distribution, StandardNormal};

use super::EmbeddingRecord;
use crate::rng::SeedPath;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// A frozen text encoder: text in, `T x D` sequence out.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<Tensor>;
}

/// Lowercased tokens split on whitespace and punctuation. Hyphens and
/// apostrophes inside a word are kept, so "hip-hop" is one token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '-' || c == '\''))
        .map(|t| t.trim_matches(|c| c == '-' || c == '\''))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Maps every token to a fixed pseudo-random unit vector derived from
/// `(seed, token)`. Identical words always share a vector, and distinct
/// words are nearly orthogonal for moderate `dim`.
#[derive(Debug)]
pub struct ToyTextEncoder {
    dim: usize,
    seed: u64,
    cache: RwLock<HashMap<String, Arc<Vec<f64>>>>,
}

impl ToyTextEncoder {
    pub fn new(dim: usize, seed: u64) -> ToyTextEncoder {
        ToyTextEncoder {
            dim,
            seed,
            cache: RwLock::new(HashMap::new()),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_vector(&self, token: &str) -> Arc<Vec<f64>> {
        if let Some(v) = self.cache.read().expect("cache lock").get(token) {
            return Arc::clone(v);
        }
        let mut rng = SeedPath::new(self.seed).label("token").label(token).rng();
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        let v = Arc::new(v);
        self.cache
            .write()
            .expect("cache lock")
            .insert(token.to_string(), Arc::clone(&v));
        v
    }
}

impl TextEncoder for ToyTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Tensor> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!("cannot encode empty text {text:?}")));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            data.extend_from_slice(&self.token_vector(t));
        }
        Tensor::new(vec![tokens.len(), self.dim], data)
    }
}

/// Precomputed text embeddings keyed by the exact text string. Records must
/// be single-layer; the frames become the token sequence.
#[derive(Debug)]
pub struct FileTextEncoder {
    dim: usize,
    records: IndexMap<String, EmbeddingRecord>,
}

impl FileTextEncoder {
    pub fn new(records: IndexMap<String, EmbeddingRecord>) -> Result<FileTextEncoder> {
        let mut dim = None;
        for r in records.values() {
            if r.layers != 1 {
                return Err(Error::InvalidArgument(format!(
                    "text embedding '{}' has {} layers; text files must be single-layer",
                    r.id, r.layers
                )));
            }
            match dim {
                None => dim = Some(r.dim),
                Some(d) if d != r.dim => {
                    return Err(Error::InvalidArgument("text embeddings have mixed dimensions".into()))
                }
                _ => {}
            }
        }
        Ok(FileTextEncoder {
            dim: dim.unwrap_or(0),
            records,
        })
    }
}

impl TextEncoder for FileTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Tensor> {
        let r = self
            .records
            .get(text)
            .ok_or_else(|| Error::MissingEmbedding(text.to_string()))?;
        Tensor::new(
            vec![r.frames, r.dim],
            r.values.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}
