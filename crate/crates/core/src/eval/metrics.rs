use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::model::JointEmbedding;
use crate::par::{self, ExecMode};
use crate::rng::SeedPath;
use crate::{Error, Result};

/// 1-based rank of `scores[target]` under decreasing score. Items tied with
/// the target share the mean rank of their tie group.
pub fn rank_from_scores(scores: &[f64], target: usize) -> f64 {
    let st = scores[target];
    let (mut greater, mut ties) = (0usize, 0usize);
    for &s in scores {
        if s > st {
            greater += 1;
        } else if s == st {
            ties += 1;
        }
    }
    1.0 + greater as f64 + (ties as f64 - 1.0) / 2.0
}

/// Rank of `pool[target]` when the pool is sorted by decreasing cosine
/// similarity with `query`.
pub fn rank_target(query: &JointEmbedding, pool: &[JointEmbedding], target: usize) -> f64 {
    let scores: Vec<f64> = pool.iter().map(|p| cosine(query, p)).collect();
    rank_from_scores(&scores, target)
}

fn cosine(a: &JointEmbedding, b: &JointEmbedding) -> f64 {
    let denom = (a.norm() * b.norm()).max(1e-12);
    a.dot(b) / denom
}

pub fn recall_at_k(ranks: &[f64], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k as f64).count() as f64 / ranks.len() as f64
}

pub fn median_rank(ranks: &[f64]) -> f64 {
    if ranks.is_empty() {
        return f64::NAN;
    }
    let mut s = ranks.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Rank of one query's target within one subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub dataset: String,
    pub subset: usize,
    pub query: usize,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubsetConfig {
    pub recall_k: Vec<usize>,
    pub subset_size: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SubsetConfig {
    fn default() -> Self {
        SubsetConfig {
            recall_k: vec![1, 5, 10],
            subset_size: 500,
            repeats: 10,
            seed: 0,
        }
    }
}

impl SubsetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.recall_k.is_empty() || self.recall_k.contains(&0) {
            return Err(Error::config("eval.recall_k", "must be a non-empty list of k >= 1"));
        }
        if self.subset_size < 2 {
            return Err(Error::config("eval.subset_size", "must be >= 2"));
        }
        if self.repeats == 0 {
            return Err(Error::config("eval.repeats", "must be >= 1"));
        }
        Ok(())
    }
}

/// Metrics for one dataset, averaged over subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub recall: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub subset_count: usize,
    pub subset_size: usize,
    pub pool_size: usize,
}

impl DatasetMetrics {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.recall.get(&k).copied()
    }
}

/// Retrieval with query `i` targeting `pool[i]`. Each repeat draws a uniform
/// subset of `min(subset_size, n)` items; every query whose target is in the
/// subset is ranked against the subset only. A pool no larger than
/// `subset_size` is evaluated once, in full.
pub fn subset_normalized_eval(
    dataset: &str,
    queries: &[JointEmbedding],
    pool: &[JointEmbedding],
    cfg: &SubsetConfig,
    mode: ExecMode,
) -> Result<(DatasetMetrics, Vec<RetrievalResult>)> {
    cfg.validate()?;
    let n = pool.len();
    if queries.len() != n {
        return Err(Error::InvalidArgument(format!("{} queries for a pool of {n}", queries.len())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("pool of {n} items is too small to rank")));
    }
    let scores = par::map_range(mode, n, |q| pool.iter().map(|p| cosine(&queries[q], p)).collect::<Vec<f64>>());
    if scores.iter().flatten().any(|s| !s.is_finite()) {
        return Err(Error::Numerical(format!("non-finite similarity in dataset '{dataset}'")));
    }

    let size = cfg.subset_size.min(n);
    let repeats = if size == n { 1 } else { cfg.repeats };
    let subsets: Vec<Vec<usize>> = (0..repeats)
        .map(|r| {
            let mut rng = SeedPath::new(cfg.seed).label("subset").label(dataset).index(r as u64).rng();
            let mut idx = if size == n { (0..n).collect() } else { index::sample(&mut rng, n, size).into_vec() };
            idx.sort_unstable();
            idx
        })
        .collect();

    let per_subset = par::map(mode, &subsets, |items| {
        items
            .iter()
            .enumerate()
            .map(|(pos, &q)| {
                let s: Vec<f64> = items.iter().map(|&p| scores[q][p]).collect();
                (q, rank_from_scores(&s, pos))
            })
            .collect::<Vec<_>>()
    });

    let mut recall: BTreeMap<usize, f64> = cfg.recall_k.iter().map(|&k| (k, 0.0)).collect();
    let mut mr = 0.0;
    let mut results = Vec::new();
    for (subset, ranked) in per_subset.iter().enumerate() {
        let ranks: Vec<f64> = ranked.iter().map(|&(_, r)| r).collect();
        for (k, v) in recall.iter_mut() {
            *v += recall_at_k(&ranks, *k);
        }
        mr += median_rank(&ranks);
        results.extend(ranked.iter().map(|&(query, rank)| RetrievalResult {
            dataset: dataset.to_string(),
            subset,
            query,
            rank,
        }));
    }
    recall.values_mut().for_each(|v| *v /= repeats as f64);
    Ok((
        DatasetMetrics {
            dataset: dataset.to_string(),
            recall,
            median_rank: mr / repeats as f64,
            subset_count: repeats,
            subset_size: size,
            pool_size: n,
        },
        results,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit(i: usize, d: usize) -> JointEmbedding {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        JointEmbedding(v)
    }

    #[test]
    fn exact_match_ranks_first_and_worst_ranks_last() {
        let pool: Vec<_> = (0..5).map(|i| unit(i, 5)).collect();
        assert_eq!(rank_target(&unit(2, 5), &pool, 2), 1.0);
        let scores: Vec<f64> = (0..500).map(|i| 500.0 - i as f64).collect();
        assert_eq!(rank_from_scores(&scores, 499), 500.0);
    }

    #[test]
    fn ties_share_mean_rank() {
        assert_eq!(rank_from_scores(&[0.5, 0.5, 0.5, 0.9], 1), 3.0);
        assert_eq!(rank_from_scores(&[0.5, 0.5], 0), 1.5);
    }

    #[test]
    fn recall_and_median_examples() {
        let ranks = [1.0, 3.0, 5.0];
        assert_eq!(recall_at_k(&ranks, 10), 1.0);
        assert_eq!(median_rank(&ranks), 3.0);
        assert_eq!(recall_at_k(&[10.0, 11.0], 10), 0.5);
        assert_eq!(median_rank(&[4.0, 1.0, 2.0, 8.0]), 3.0);
    }

    #[test]
    fn small_pool_is_one_full_subset() {
        let pool: Vec<_> = (0..6).map(|i| unit(i, 6)).collect();
        let queries: Vec<_> = (0..6).map(|i| unit((i + 1) % 6, 6)).collect();
        let (m, results) = subset_normalized_eval("d", &queries, &pool, &SubsetConfig::default(), ExecMode::Sequential).unwrap();
        assert_eq!(m.subset_count, 1);
        assert_eq!(m.pool_size, 6);
        assert_eq!(results.len(), 6);
        let plain: Vec<f64> = (0..6).map(|i| rank_target(&queries[i], &pool, i)).collect();
        assert_relative_eq!(m.recall_at(1).unwrap(), recall_at_k(&plain, 1));
        assert_relative_eq!(m.median_rank, median_rank(&plain));
    }
}
