//! Text-to-audio retrieval: ranking, Recall@k, median rank, subset
//! normalization, multi-dataset reports and ablation tables.

mod ablation;
mod metrics;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::corpus::Track;
use crate::encoders::{EmbeddingRecord, TextEncoder};
use crate::model::Model;
use crate::par::{self, ExecMode};
use crate::rng::{derive_seed, rng_from_seed};
use crate::textaug::{tag_to_caption, Grammar};
use crate::train::embed_texts;
use crate::{Error, Result};

pub use ablation::{ablation_report, summary_table, AblationRow, AblationTable};
pub use metrics::{
    median_rank, rank_from_scores, rank_target, recall_at_k, subset_normalized_eval, DatasetMetrics, RetrievalResult,
    SubsetConfig,
};

/// What a track's text query looks like at evaluation time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    /// A caption rendered from every tag of the track.
    #[default]
    Caption,
    /// The comma-joined tag string.
    Tags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub recall_k: Vec<usize>,
    pub subset_size: usize,
    pub repeats: usize,
    pub seed: u64,
    pub query: QueryKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SubsetConfig::default();
        EvalConfig {
            recall_k: s.recall_k,
            subset_size: s.subset_size,
            repeats: s.repeats,
            seed: s.seed,
            query: QueryKind::Caption,
        }
    }
}

impl EvalConfig {
    pub fn subsets(&self) -> SubsetConfig {
        SubsetConfig {
            recall_k: self.recall_k.clone(),
            subset_size: self.subset_size,
            repeats: self.repeats,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub datasets: Vec<DatasetMetrics>,
    /// Mean R@10 over datasets, when 10 is among the evaluated k.
    pub avg_r10: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

impl MetricReport {
    pub fn new(datasets: Vec<DatasetMetrics>) -> MetricReport {
        let r10: Option<Vec<f64>> = datasets.iter().map(|d| d.recall_at(10)).collect();
        let avg_r10 = r10.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64);
        MetricReport {
            datasets,
            avg_r10,
            config_hash: None,
        }
    }

    pub fn dataset(&self, name: &str) -> Option<&DatasetMetrics> {
        self.datasets.iter().find(|d| d.dataset == name)
    }

    /// One row per dataset: recall columns, MR, subset count and pool size.
    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self.datasets.first().map(|d| d.recall.keys().copied().collect()).unwrap_or_default();
        let mut out = String::from("dataset");
        for k in &ks {
            out.push_str(&format!(",R@{k}"));
        }
        out.push_str(",MR,subset_count,subset_size,pool_size\n");
        for d in &self.datasets {
            out.push_str(&d.dataset);
            for k in &ks {
                out.push_str(&format!(",{}", fmt_opt(d.recall_at(*k))));
            }
            out.push_str(&format!(",{},{},{},{}\n", d.median_rank, d.subset_count, d.subset_size, d.pool_size));
        }
        out.push_str(&format!("avg,{}\n", fmt_opt(self.avg_r10)));
        out
    }
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Text queries for each track, deterministic in `(seed, track id)`.
pub fn build_queries(tracks: &[Track], kind: QueryKind, grammar: &Grammar, seed: u64) -> Result<Vec<String>> {
    tracks
        .iter()
        .map(|t| match kind {
            QueryKind::Tags => Ok(t.tag_string()),
            QueryKind::Caption => tag_to_caption(&t.tags, grammar, &mut rng_from_seed(derive_seed(seed, "query", &t.id))),
        })
        .collect()
}

/// Embed every track's audio and query text, then run subset-normalized
/// retrieval.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_dataset(
    name: &str,
    model: &Model,
    tracks: &[Track],
    audio: &IndexMap<String, EmbeddingRecord>,
    encoder: &dyn TextEncoder,
    grammar: &Grammar,
    cfg: &EvalConfig,
    mode: ExecMode,
) -> Result<(DatasetMetrics, Vec<RetrievalResult>)> {
    let pool = par::try_map(mode, tracks, |t| {
        let rec = audio
            .get(&t.id)
            .ok_or_else(|| Error::MissingEmbedding(format!("no audio embedding for track '{}'", t.id)))?;
        model.embed_audio(rec)
    })?;
    let texts = build_queries(tracks, cfg.query, grammar, cfg.seed)?;
    let queries = embed_texts(model, encoder, &texts, mode)?;
    subset_normalized_eval(name, &queries, &pool, &cfg.subsets(), mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn metrics(name: &str, r10: f64) -> DatasetMetrics {
        DatasetMetrics {
            dataset: name.into(),
            recall: BTreeMap::from([(1, r10 / 2.0), (10, r10)]),
            median_rank: 4.0,
            subset_count: 1,
            subset_size: 10,
            pool_size: 10,
        }
    }

    #[test]
    fn average_r10_over_datasets() {
        let r = MetricReport::new(vec![metrics("a", 0.2), metrics("b", 0.4)]);
        assert!((r.avg_r10.unwrap() - 0.3).abs() < 1e-15);
        let csv = r.to_csv();
        assert!(csv.starts_with("dataset,R@1,R@10,MR,subset_count,subset_size,pool_size\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn eval_config_defaults_fill_missing_fields() {
        let c: EvalConfig = serde_json::from_str(r#"{"repeats": 3, "query": "tags"}"#).unwrap();
        assert_eq!(c.subsets().repeats, 3);
        assert_eq!(c.subset_size, 500);
        assert_eq!(c.query, QueryKind::Tags);
    }
}
