use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{fmt_opt, MetricReport};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub baseline: f64,
    /// `(value - baseline) / baseline`; `None` when the baseline is 0.
    pub rel_change: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,dataset,metric,value,baseline,rel_change\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.label,
                r.dataset,
                r.metric,
                r.value,
                r.baseline,
                fmt_opt(r.rel_change)
            ));
        }
        out
    }

    pub fn get(&self, label: &str, dataset: &str, metric: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.label == label && r.dataset == dataset && r.metric == metric)
    }
}

fn metric_values(report: &MetricReport) -> Vec<(String, String, f64)> {
    let mut out = Vec::new();
    for d in &report.datasets {
        for (k, v) in &d.recall {
            out.push((d.dataset.clone(), format!("R@{k}"), *v));
        }
        out.push((d.dataset.clone(), "MR".to_string(), d.median_rank));
    }
    if let Some(avg) = report.avg_r10 {
        out.push(("avg".to_string(), "R@10".to_string(), avg));
    }
    out
}

/// Relative change of every metric of every run against `baseline`.
pub fn ablation_report(runs: &IndexMap<String, MetricReport>, baseline: &str) -> Result<AblationTable> {
    let base = runs
        .get(baseline)
        .ok_or_else(|| Error::InvalidArgument(format!("baseline run '{baseline}' not found")))?;
    let base_values = metric_values(base);
    let mut rows = Vec::new();
    for (label, report) in runs {
        for (dataset, metric, value) in metric_values(report) {
            let Some(&(_, _, b)) = base_values.iter().find(|(d, m, _)| *d == dataset && *m == metric) else {
                continue;
            };
            rows.push(AblationRow {
                label: label.clone(),
                dataset,
                metric,
                value,
                baseline: b,
                rel_change: (b != 0.0).then(|| (value - b) / b),
            });
        }
    }
    Ok(AblationTable {
        baseline: baseline.to_string(),
        rows,
    })
}

/// One row per run with per-dataset R@10 and MR columns and the average
/// R@10 last.
pub fn summary_table(runs: &IndexMap<String, MetricReport>) -> String {
    let datasets: Vec<String> = runs
        .values()
        .next()
        .map(|r| r.datasets.iter().map(|d| d.dataset.clone()).collect())
        .unwrap_or_default();
    let mut out = String::from("run");
    for d in &datasets {
        out.push_str(&format!(",{d} R@10,{d} MR"));
    }
    out.push_str(",Avg R@10\n");
    for (label, report) in runs {
        out.push_str(label);
        for d in &datasets {
            let m = report.dataset(d);
            out.push_str(&format!(
                ",{},{}",
                fmt_opt(m.and_then(|m| m.recall_at(10))),
                fmt_opt(m.map(|m| m.median_rank))
            ));
        }
        out.push_str(&format!(",{}\n", fmt_opt(report.avg_r10)));
    }
    out
}
