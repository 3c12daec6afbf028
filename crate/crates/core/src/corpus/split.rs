use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Track;
use crate::rng::rng_from_seed;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
    pub fractions: [f64; 3],
}

/// Shuffle ids by `seed`, then slice contiguously into train, validation,
/// test. Validation and test sizes are floors; the remainder goes to train.
pub fn split_corpus(tracks: &[Track], fractions: [f64; 3], seed: u64) -> Result<CorpusSplit> {
    if tracks.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} tracks; need at least 3",
            tracks.len()
        )));
    }
    if fractions.iter().any(|&f| f.is_nan() || f <= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions must sum to 1, got {sum}"
        )));
    }
    let n = tracks.len();
    // the epsilon absorbs representation error such as 100 * 0.7 = 70.00000000000001
    let floor = |f: f64| ((n as f64) * f + 1e-9).floor() as usize;
    let n_val = floor(fractions[1]);
    let n_test = floor(fractions[2]);
    let n_train = n - n_val - n_test;

    let mut ids: Vec<String> = tracks.iter().map(|t| t.id.clone()).collect();
    ids.shuffle(&mut rng_from_seed(seed));
    let test = ids.split_off(n_train + n_val);
    let validation = ids.split_off(n_train);
    Ok(CorpusSplit {
        train: ids,
        validation,
        test,
        seed,
        fractions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Category, TagSet};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn tracks(n: usize) -> Vec<Track> {
        (0..n)
            .map(|i| {
                let mut tags = TagSet::new();
                tags.insert(Category::Genre, vec!["rock".into()]);
                Track::new(format!("t{i}"), tags).unwrap()
            })
            .collect()
    }

    #[test]
    fn ten_tracks() {
        let s = split_corpus(&tracks(10), [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split_corpus(&tracks(10), [0.8, 0.1, 0.1], 7).unwrap());
    }

    #[test]
    fn hundred_tracks_partition() {
        let ts = tracks(100);
        let s = split_corpus(&ts, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 15, 15));
        let all: HashSet<_> = s.train.iter().chain(&s.validation).chain(&s.test).collect();
        assert_eq!(all.len(), 100);
        for t in &ts {
            assert!(all.contains(&t.id));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(split_corpus(&tracks(2), [0.8, 0.1, 0.1], 0).is_err());
        assert!(split_corpus(&tracks(10), [0.8, 0.2, 0.0], 0).is_err());
        assert!(split_corpus(&tracks(10), [0.8, 0.1, 0.2], 0).is_err());
    }

    proptest! {
        #[test]
        fn split_is_deterministic_partition(n in 3usize..300, seed in any::<u64>(), a in 0.05f64..0.9) {
            let rest = 1.0 - a;
            let fr = [a, rest / 2.0, rest / 2.0];
            let ts = tracks(n);
            let s = split_corpus(&ts, fr, seed).unwrap();
            prop_assert_eq!(&s, &split_corpus(&ts, fr, seed).unwrap());
            let mut all: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }
    }
}
