//! Run files (JSON lines) and metric tables (CSV).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use divrank_core::corpus::{CategoryId, ImageId, QueryId};
use divrank_core::metrics::RunMetrics;
use divrank_core::retrieval::{RankedItem, RankedList, Strategy};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{io_err, FormatError, Result};

pub const METRICS_HEADER: &str = "strategy,k,P,CR,F1_harmonic,F1_perquery_mean,n_queries";
pub const ABLATION_HEADER: &str = "axis,value,k,P,CR,F1_harmonic,F1_perquery_mean,n_queries";

#[derive(Debug, Serialize, Deserialize)]
struct ItemLine {
    image_id: u32,
    rank: usize,
    sim: f64,
    pred_category: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ListLine {
    query_id: u32,
    strategy: String,
    k: usize,
    items: Vec<ItemLine>,
    #[serde(default)]
    flagged: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ConfigLine {
    config: serde_json::Value,
}

/// First line is `{"config": {...}}`, then one object per list.
pub fn run_to_string(cfg: &ExperimentConfig, lists: &[RankedList]) -> String {
    let mut out = serde_json::to_string(&ConfigLine { config: cfg.to_json() }).expect("config serializes");
    out.push('\n');
    for l in lists {
        let line = ListLine {
            query_id: l.query_id.0,
            strategy: l.strategy.as_str().into(),
            k: l.k,
            items: l
                .items
                .iter()
                .enumerate()
                .map(|(i, it)| ItemLine {
                    image_id: it.image_id.0,
                    rank: i + 1,
                    sim: it.similarity,
                    pred_category: it.predicted.map(|c| c.0),
                })
                .collect(),
            flagged: l.flagged,
        };
        out.push_str(&serde_json::to_string(&line).expect("run line serializes"));
        out.push('\n');
    }
    out
}

pub fn write_run(path: &Path, cfg: &ExperimentConfig, lists: &[RankedList]) -> Result<()> {
    fs::write(path, run_to_string(cfg, lists)).map_err(io_err(path))
}

fn run_err(line: usize, detail: impl Into<String>) -> FormatError {
    FormatError::Run {
        line,
        detail: detail.into(),
    }
}

/// Lists in file order. The config line is optional.
pub fn parse_run(text: &str) -> Result<Vec<RankedList>> {
    let mut lists = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if no == 1 && serde_json::from_str::<ConfigLine>(line).is_ok() {
            continue;
        }
        let l: ListLine = serde_json::from_str(line).map_err(|e| run_err(no, e.to_string()))?;
        let strategy: Strategy = l.strategy.parse().map_err(|_| run_err(no, format!("strategy {:?}", l.strategy)))?;
        for (pos, it) in l.items.iter().enumerate() {
            if it.rank != pos + 1 {
                return Err(run_err(no, "items out of rank order").into());
            }
        }
        lists.push(RankedList {
            query_id: QueryId(l.query_id),
            strategy,
            k: l.k,
            items: l
                .items
                .into_iter()
                .map(|it| RankedItem {
                    image_id: ImageId(it.image_id),
                    similarity: it.sim,
                    predicted: it.pred_category.map(CategoryId),
                })
                .collect(),
            flagged: l.flagged,
        });
    }
    Ok(lists)
}

pub fn read_run(path: &Path) -> Result<Vec<RankedList>> {
    parse_run(&fs::read_to_string(path).map_err(io_err(path))?)
}

fn config_comment(cfg: &ExperimentConfig) -> String {
    format!("# config: {}\n", cfg.echo())
}

fn metric_cells(m: &RunMetrics, k: usize) -> Option<String> {
    let s = m.at(k)?;
    Some(format!(
        "{},{:.6},{:.6},{:.6},{:.6},{}",
        s.k, s.precision, s.cluster_recall, s.f1, s.f1_per_query_mean, s.n_queries
    ))
}

/// One row per (strategy, k).
pub fn metrics_csv(cfg: &ExperimentConfig, rows: &[(Strategy, RunMetrics)]) -> String {
    let mut out = config_comment(cfg);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for (strategy, m) in rows {
        for s in &m.summaries {
            if let Some(cells) = metric_cells(m, s.k) {
                let _ = writeln!(out, "{strategy},{cells}");
            }
        }
    }
    out
}

/// One row per (value, k).
pub fn ablation_csv(cfg: &ExperimentConfig, axis: &str, rows: &[(String, RunMetrics)]) -> String {
    let mut out = config_comment(cfg);
    out.push_str(ABLATION_HEADER);
    out.push('\n');
    for (value, m) in rows {
        for s in &m.summaries {
            if let Some(cells) = metric_cells(m, s.k) {
                let _ = writeln!(out, "{axis},{value},{cells}");
            }
        }
    }
    out
}
