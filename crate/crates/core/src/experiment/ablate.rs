use std::path::PathBuf;

use indexmap::IndexMap;
use serde::Serialize;
use serde_json::Value;

use super::runs::{run_eval, run_train, EvalRequest, SplitSelection};
use super::{write_text, ExperimentConfig};
use crate::eval::{ablation_report, summary_table, AblationTable, MetricReport};
use crate::par::{self, ExecMode};
use crate::{Error, Result};

/// One grid dimension: a config path and the values it takes.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    /// Name as written on the command line, used in run labels.
    pub name: String,
    /// Dotted path into the experiment config.
    pub path: String,
    pub values: Vec<Value>,
}

const ALIASES: [(&str, &str); 5] = [
    ("p_cap", "augment.p_cap"),
    ("view_dropout", "augment.view_dropout"),
    ("swap_max_prob", "augment.swap_max_prob"),
    ("k_views", "augment.k_views"),
    ("hard_negative_source", "augment.hard_negative_source"),
];

/// Parse `key=v1,v2,...`. Values are read as JSON when possible and as
/// plain strings otherwise.
pub fn parse_grid_arg(arg: &str) -> Result<GridAxis> {
    let (name, values) = arg
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("grid axis '{arg}' must look like key=v1,v2")))?;
    let name = name.trim();
    let values: Vec<Value> = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if name.is_empty() || values.is_empty() {
        return Err(Error::InvalidArgument(format!("grid axis '{arg}' needs a key and at least one value")));
    }
    let path = ALIASES
        .iter()
        .find(|(alias, _)| *alias == name)
        .map_or(name, |(_, full)| full)
        .to_string();
    Ok(GridAxis {
        name: name.to_string(),
        path,
        values,
    })
}

fn set_path(cfg: &ExperimentConfig, path: &str, value: &Value) -> Result<ExperimentConfig> {
    let mut json = serde_json::to_value(cfg).expect("config serializes");
    let mut node = &mut json;
    for key in path.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(key))
            .ok_or_else(|| Error::config(path, "unknown config path"))?;
    }
    *node = value.clone();
    let updated = ExperimentConfig::from_json(&json.to_string())?;
    updated.validate()?;
    Ok(updated)
}

fn render(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// A labelled configuration inside an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Cartesian product of the axes, first axis varying slowest.
pub fn grid_cells(base: &ExperimentConfig, axes: &[GridAxis]) -> Result<Vec<Cell>> {
    let mut cells = vec![Cell {
        label: String::new(),
        config: base.clone(),
    }];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for cell in &cells {
            for v in &axis.values {
                let sep = if cell.label.is_empty() { "" } else { "," };
                next.push(Cell {
                    label: format!("{}{sep}{}={}", cell.label, axis.name, render(v)),
                    config: set_path(&cell.config, &axis.path, v)?,
                });
            }
        }
        cells = next;
    }
    if axes.is_empty() {
        cells[0].label = "base".into();
    }
    Ok(cells)
}

/// The cumulative component toggles: tags only, then tag-to-caption, view
/// dropout and swap-based hard negatives added one at a time.
pub fn table4_cells(base: &ExperimentConfig) -> Result<Vec<Cell>> {
    let p_cap = if base.augment.p_cap > 0.0 { base.augment.p_cap } else { 0.5 };
    let swap = if base.augment.swap_max_prob > 0.0 {
        base.augment.swap_max_prob
    } else {
        0.15
    };
    let rows = [
        ("tags only", 0.0, false, 0.0),
        ("+ tag-to-caption", p_cap, false, 0.0),
        ("+ view dropout", p_cap, true, 0.0),
        ("+ TextSwap", p_cap, true, swap),
    ];
    rows.iter()
        .map(|&(label, p, vd, s)| {
            let mut c = base.clone();
            c.augment.p_cap = p;
            c.augment.view_dropout = vd;
            c.augment.swap_max_prob = s;
            c.validate()?;
            Ok(Cell {
                label: label.into(),
                config: c,
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct AblateRequest {
    pub cells: Vec<Cell>,
    pub out_dir: PathBuf,
    pub force: bool,
    pub split: SplitSelection,
    /// Defaults to the first cell.
    pub baseline: Option<String>,
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub reports: IndexMap<String, MetricReport>,
    pub table: AblationTable,
}

#[derive(Serialize)]
struct RunEntry<'a> {
    label: &'a str,
    dir: String,
    config_hash: String,
    report: &'a MetricReport,
}

fn slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    s.trim_matches('_').to_string()
}

/// Train and evaluate every cell in its own directory under `out_dir`, then
/// write `runs.json`, `ablation.json`, `ablation.csv` and `summary.csv`.
pub fn run_ablate(req: &AblateRequest, mode: ExecMode) -> Result<AblationOutcome> {
    if req.cells.is_empty() {
        return Err(Error::InvalidArgument("ablation has no cells".into()));
    }
    let mut planned: Vec<(String, ExperimentConfig, PathBuf)> = Vec::with_capacity(req.cells.len());
    for (i, cell) in req.cells.iter().enumerate() {
        let dir = req.out_dir.join(format!("{i:02}-{}", slug(&cell.label)));
        let mut cfg = cell.config.clone();
        cfg.out_dir = Some(dir.clone());
        cfg.validate()?;
        if let Some((other, _, _)) = planned.iter().find(|(l, c, _)| *l == cell.label || c.hash() == cfg.hash()) {
            return Err(Error::InvalidArgument(format!(
                "cells '{other}' and '{}' would write identical runs",
                cell.label
            )));
        }
        if dir.join("config.sha256").exists() && !req.force {
            return Err(Error::InvalidArgument(format!(
                "{} already holds a run; pass --force to overwrite",
                dir.display()
            )));
        }
        planned.push((cell.label.clone(), cfg, dir));
    }
    let baseline = req.baseline.clone().unwrap_or_else(|| planned[0].0.clone());
    if !planned.iter().any(|(l, _, _)| *l == baseline) {
        return Err(Error::InvalidArgument(format!("baseline '{baseline}' is not one of the cells")));
    }

    let results = par::try_map(mode, &planned, |(label, cfg, dir)| {
        log::info!("ablation cell '{label}' -> {}", dir.display());
        let summary = run_train(cfg, mode, req.force)?;
        let report = run_eval(
            &EvalRequest {
                ckpt: dir.join("best.ckpt"),
                datasets: Vec::new(),
                vocab: None,
                split: req.split,
                eval: cfg.eval.clone(),
                out: dir.join("report.json"),
            },
            mode,
        )?;
        Ok::<_, Error>((summary.config_hash, report))
    })?;

    let mut reports = IndexMap::new();
    let mut entries = Vec::new();
    for ((label, _, dir), (hash, report)) in planned.iter().zip(&results) {
        reports.insert(label.clone(), report.clone());
        entries.push(RunEntry {
            label,
            dir: dir.display().to_string(),
            config_hash: hash.clone(),
            report,
        });
    }
    let table = ablation_report(&reports, &baseline)?;
    let out = &req.out_dir;
    write_text(
        &out.join("runs.json"),
        &(serde_json::to_string_pretty(&entries).expect("runs serialize") + "\n"),
    )?;
    write_text(
        &out.join("ablation.json"),
        &(serde_json::to_string_pretty(&table).expect("table serializes") + "\n"),
    )?;
    write_text(&out.join("ablation.csv"), &table.to_csv())?;
    write_text(&out.join("summary.csv"), &summary_table(&reports))?;
    Ok(AblationOutcome { reports, table })
}
