use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use indexmap::IndexMap;
use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::{Category, TagSet, TagVocabulary, Track};
use crate::encoders::EmbeddingRecord;
use crate::rng::SeedPath;
use crate::{Error, Result};

/// Latent "audio meaning" of every vocabulary descriptor.
///
/// A synthetic track's audio embedding is the mean of its descriptors'
/// latents plus isotropic Gaussian noise of scale `sigma`, replicated across
/// layers and frames.
#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub layers: usize,
    pub frames: usize,
    latents: BTreeMap<String, Vec<f64>>,
}

impl SyntheticWorld {
    /// Latents are unit-norm Gaussian directions, each derived from
    /// `(seed, descriptor)` alone.
    pub fn new(vocab: &TagVocabulary, dim: usize, sigma: f64, seed: u64) -> Result<SyntheticWorld> {
        if dim == 0 {
            return Err(Error::InvalidArgument("latent dim must be >= 1".into()));
        }
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let mut latents = BTreeMap::new();
        for (_, descs) in vocab.categories() {
            for d in descs {
                let mut rng = SeedPath::new(seed).label("latent").label(d).rng();
                let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                latents.insert(d.clone(), v);
            }
        }
        Ok(SyntheticWorld {
            dim,
            sigma,
            seed,
            layers: 1,
            frames: 1,
            latents,
        })
    }

    pub fn with_shape(mut self, layers: usize, frames: usize) -> SyntheticWorld {
        self.layers = layers.max(1);
        self.frames = frames.max(1);
        self
    }

    pub fn latent(&self, descriptor: &str) -> Option<&[f64]> {
        self.latents.get(descriptor).map(Vec::as_slice)
    }

    /// Noise-free audio vector for a tag set.
    pub fn clean_embedding(&self, tags: &TagSet) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; self.dim];
        let mut count = 0usize;
        for d in tags.values().flatten() {
            let lat = self
                .latent(d)
                .ok_or_else(|| Error::InvalidArgument(format!("no latent for descriptor '{d}'")))?;
            acc.iter_mut().zip(lat).for_each(|(a, l)| *a += l);
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("track has no tags".into()));
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        Ok(acc)
    }

    fn embed(&self, track: &Track) -> Result<EmbeddingRecord> {
        let mut base = self.clean_embedding(&track.tags)?;
        if self.sigma > 0.0 {
            let mut rng = SeedPath::new(self.seed).label("noise").label(&track.id).rng();
            for b in base.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *b += self.sigma * z;
            }
        }
        let frame: Vec<f32> = base.iter().map(|&x| x as f32).collect();
        let mut values = Vec::with_capacity(self.layers * self.frames * self.dim);
        for _ in 0..self.layers * self.frames {
            values.extend_from_slice(&frame);
        }
        EmbeddingRecord::new(track.id.clone(), self.layers, self.frames, self.dim, values)
    }
}

const GENRES: [&str; 16] = [
    "rock", "pop", "jazz", "blues", "hip-hop", "electronic", "classical", "country", "folk", "metal", "reggae",
    "funk", "soul", "ambient", "techno", "disco",
];
const MOODS: [&str; 16] = [
    "happy", "sad", "energetic", "mellow", "dark", "calm", "uplifting", "aggressive", "romantic", "dreamy", "tense",
    "playful", "melancholic", "epic", "relaxed", "groovy",
];
const INSTRUMENTS: [&str; 16] = [
    "guitar", "piano", "drums", "bass", "violin", "synth", "saxophone", "trumpet", "cello", "flute", "organ",
    "vocals", "harp", "clarinet", "ukulele", "banjo",
];

/// A vocabulary with `per_category` descriptors in each category, taken from
/// fixed word lists and extended with numbered names past their end.
pub fn synthetic_vocabulary(per_category: usize) -> Result<TagVocabulary> {
    let pick = |words: &[&str], prefix: &str| -> Vec<String> {
        (0..per_category)
            .map(|i| words.get(i).map_or_else(|| format!("{prefix}{i}"), |w| w.to_string()))
            .collect()
    };
    let mut raw = BTreeMap::new();
    raw.insert(Category::Genre, pick(&GENRES, "genre"));
    raw.insert(Category::Mood, pick(&MOODS, "mood"));
    raw.insert(Category::Instrument, pick(&INSTRUMENTS, "instrument"));
    TagVocabulary::new(raw)
}

/// Generate `n` tracks with per-category tag counts drawn uniformly from
/// `tags_per_category`, plus their audio embeddings.
pub fn generate_synthetic_corpus(
    n: usize,
    vocab: &TagVocabulary,
    world: &SyntheticWorld,
    tags_per_category: RangeInclusive<usize>,
) -> Result<(Vec<Track>, IndexMap<String, EmbeddingRecord>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let (lo, hi) = (*tags_per_category.start(), *tags_per_category.end());
    if lo == 0 || lo > hi {
        return Err(Error::InvalidArgument(format!(
            "tags_per_category must be a non-empty range starting at >= 1, got {lo}..={hi}"
        )));
    }
    for cat in Category::ALL {
        let have = vocab.descriptors(cat).len();
        if have == 0 {
            return Err(Error::Vocabulary(format!("category '{cat}' is empty")));
        }
        if have < hi {
            return Err(Error::Vocabulary(format!(
                "category '{cat}' has {have} descriptors but up to {hi} per track were requested"
            )));
        }
    }

    let mut tracks = Vec::with_capacity(n);
    let mut embeddings = IndexMap::with_capacity(n);
    for i in 0..n {
        let id = format!("syn{i:05}");
        let mut rng = SeedPath::new(world.seed).label("tags").index(i as u64).rng();
        let mut tags = TagSet::new();
        for (cat, descs) in vocab.categories() {
            let k = rng.random_range(lo..=hi);
            let chosen: Vec<String> = descs.choose_multiple(&mut rng, k).cloned().collect();
            tags.insert(cat, chosen);
        }
        let track = Track::new(id.clone(), tags)?;
        embeddings.insert(id, world.embed(&track)?);
        tracks.push(track);
    }
    Ok((tracks, embeddings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_vocabulary_sizes() {
        let v = synthetic_vocabulary(20).unwrap();
        for cat in Category::ALL {
            assert_eq!(v.descriptors(cat).len(), 20);
        }
        assert!(v.contains(Category::Genre, "hip-hop"));
        assert!(v.contains(Category::Mood, "mood19"));
    }

    fn vocab() -> TagVocabulary {
        let mut raw = BTreeMap::new();
        raw.insert(Category::Genre, vec!["rock".into(), "pop".into(), "jazz".into()]);
        raw.insert(Category::Mood, vec!["sad".into(), "happy".into(), "calm".into()]);
        raw.insert(Category::Instrument, vec!["guitar".into(), "piano".into(), "drums".into()]);
        TagVocabulary::new(raw).unwrap()
    }

    fn track(tags: &[(Category, &str)]) -> Track {
        let mut set = TagSet::new();
        for (c, d) in tags {
            set.entry(*c).or_default().push(d.to_string());
        }
        Track::new("x", set).unwrap()
    }

    #[test]
    fn zero_noise_single_tag_is_the_latent() {
        let w = SyntheticWorld::new(&vocab(), 8, 0.0, 1).unwrap();
        let rec = w.embed(&track(&[(Category::Genre, "rock")])).unwrap();
        let lat: Vec<f32> = w.latent("rock").unwrap().iter().map(|&x| x as f32).collect();
        assert_eq!(rec.values, lat);
    }

    #[test]
    fn zero_noise_is_mean_of_latents() {
        let w = SyntheticWorld::new(&vocab(), 8, 0.0, 1).unwrap().with_shape(2, 3);
        let rec = w
            .embed(&track(&[(Category::Genre, "rock"), (Category::Instrument, "guitar")]))
            .unwrap();
        let (a, b) = (w.latent("rock").unwrap(), w.latent("guitar").unwrap());
        for l in 0..2 {
            for f in 0..3 {
                for (d, (x, y)) in a.iter().zip(b).enumerate() {
                    assert_eq!(rec.value(l, f, d), ((x + y) / 2.0) as f32);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_respects_ranges() {
        let w = SyntheticWorld::new(&vocab(), 8, 0.1, 9).unwrap();
        let (t1, e1) = generate_synthetic_corpus(50, &vocab(), &w, 1..=2).unwrap();
        let (t2, e2) = generate_synthetic_corpus(50, &vocab(), &w, 1..=2).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(e1, e2);
        for t in &t1 {
            for cat in Category::ALL {
                let k = t.tags[&cat].len();
                assert!((1..=2).contains(&k));
            }
        }
    }

    #[test]
    fn errors() {
        let w = SyntheticWorld::new(&vocab(), 8, 0.1, 9).unwrap();
        assert!(generate_synthetic_corpus(0, &vocab(), &w, 1..=2).is_err());
        assert!(generate_synthetic_corpus(5, &vocab(), &w, 1..=4).is_err());
        let mut raw = BTreeMap::new();
        raw.insert(Category::Genre, vec!["rock".into(), "pop".into()]);
        raw.insert(Category::Mood, vec![]);
        let v = TagVocabulary::new(raw).unwrap();
        let w = SyntheticWorld::new(&v, 8, 0.1, 9).unwrap();
        assert!(generate_synthetic_corpus(5, &v, &w, 1..=1).is_err());
        assert!(SyntheticWorld::new(&vocab(), 8, -1.0, 0).is_err());
    }
}
