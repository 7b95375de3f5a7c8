//! Relevance (precision), diversity (cluster recall) and their F1, per query
//! and macro-averaged over a run.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use crate::corpus::{CategoryId, EmbeddingCorpus, ImageId, QueryId};
use crate::error::{contract, Result};
use crate::retrieval::RankedList;

/// Ground truth needed to score a list.
pub trait RelevanceTruth {
    /// Category of `image` when it is relevant to `query`, `None` otherwise.
    fn category_of(&self, query: QueryId, image: ImageId) -> Option<CategoryId>;
    /// Number of ground-truth categories of `query`, `None` for unknown queries.
    fn gt_category_count(&self, query: QueryId) -> Option<usize>;
}

impl RelevanceTruth for EmbeddingCorpus {
    fn category_of(&self, query: QueryId, image: ImageId) -> Option<CategoryId> {
        self.image(image)
            .filter(|i| i.query_id == query)
            .and_then(|i| i.category)
    }

    fn gt_category_count(&self, query: QueryId) -> Option<usize> {
        self.query(query).map(|q| q.gt_categories.len())
    }
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(contract("metrics", "k must be at least 1"));
    }
    Ok(())
}

/// Relevant items among the first `k`, divided by `k` (short lists are penalized).
pub fn precision_at_k(list: &RankedList, truth: &impl RelevanceTruth, k: usize) -> Result<f64> {
    check_k(k)?;
    let hits = list
        .items
        .iter()
        .take(k)
        .filter(|it| truth.category_of(list.query_id, it.image_id).is_some())
        .count();
    Ok(hits as f64 / k as f64)
}

/// Distinct ground-truth categories covered by relevant items in the first `k`,
/// over the query's ground-truth category count.
pub fn cluster_recall_at_k(list: &RankedList, truth: &impl RelevanceTruth, k: usize) -> Result<f64> {
    check_k(k)?;
    let total = match truth.gt_category_count(list.query_id) {
        None => return Err(contract("metrics", format!("unknown query {}", list.query_id))),
        Some(0) => {
            return Err(contract(
                "metrics",
                format!("query {} has no ground-truth categories", list.query_id),
            ))
        }
        Some(n) => n,
    };
    let covered: BTreeSet<CategoryId> = list
        .items
        .iter()
        .take(k)
        .filter_map(|it| truth.category_of(list.query_id, it.image_id))
        .collect();
    Ok(covered.len() as f64 / total as f64)
}

pub fn f1_at_k(p: f64, cr: f64) -> f64 {
    if p + cr == 0.0 {
        0.0
    } else {
        2.0 * p * cr / (p + cr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub k: usize,
    pub precision: f64,
    pub cluster_recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMetrics {
    pub query_id: QueryId,
    pub at: Vec<MetricTriple>,
}

impl QueryMetrics {
    pub fn compute(list: &RankedList, truth: &impl RelevanceTruth, ks: &[usize]) -> Result<Self> {
        let at = ks
            .iter()
            .map(|&k| {
                let precision = precision_at_k(list, truth, k)?;
                let cluster_recall = cluster_recall_at_k(list, truth, k)?;
                Ok(MetricTriple {
                    k,
                    precision,
                    cluster_recall,
                    f1: f1_at_k(precision, cluster_recall),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            query_id: list.query_id,
            at,
        })
    }

    pub fn get(&self, k: usize) -> Option<&MetricTriple> {
        self.at.iter().find(|m| m.k == k)
    }
}

/// Macro averages at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub k: usize,
    pub precision: f64,
    pub cluster_recall: f64,
    /// Harmonic mean of the macro-averaged precision and cluster recall.
    pub f1: f64,
    /// Mean of the per-query F1 values.
    pub f1_per_query_mean: f64,
    pub n_queries: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub summaries: Vec<RunSummary>,
    pub per_query: Vec<QueryMetrics>,
}

impl RunMetrics {
    pub fn at(&self, k: usize) -> Option<&RunSummary> {
        self.summaries.iter().find(|s| s.k == k)
    }
}

/// Macro averages of per-query `(precision, cluster recall)` pairs.
pub fn summarize(k: usize, pairs: &[(f64, f64)]) -> RunSummary {
    let n = pairs.len().max(1) as f64;
    let (mut p, mut cr, mut f1) = (0.0, 0.0, 0.0);
    for &(qp, qcr) in pairs {
        p += qp;
        cr += qcr;
        f1 += f1_at_k(qp, qcr);
    }
    let (p, cr) = (p / n, cr / n);
    RunSummary {
        k,
        precision: p,
        cluster_recall: cr,
        f1: f1_at_k(p, cr),
        f1_per_query_mean: f1 / n,
        n_queries: pairs.len(),
    }
}

pub fn evaluate_run(runs: &[RankedList], truth: &impl RelevanceTruth, ks: &[usize]) -> Result<RunMetrics> {
    let mut seen = BTreeMap::new();
    for r in runs {
        if seen.insert(r.query_id, ()).is_some() {
            return Err(contract("evaluate_run", format!("query {} appears twice", r.query_id)));
        }
        if truth.gt_category_count(r.query_id).is_none() {
            return Err(contract("evaluate_run", format!("unknown query {}", r.query_id)));
        }
    }
    if runs.is_empty() {
        return Err(contract("evaluate_run", "no queries to evaluate"));
    }
    let per_query: Vec<QueryMetrics> = runs
        .iter()
        .map(|r| QueryMetrics::compute(r, truth, ks))
        .collect::<Result<_>>()?;
    let summaries = ks
        .iter()
        .enumerate()
        .map(|(slot, &k)| {
            let pairs: Vec<(f64, f64)> = per_query
                .iter()
                .map(|q| (q.at[slot].precision, q.at[slot].cluster_recall))
                .collect();
            summarize(k, &pairs)
        })
        .collect();
    Ok(RunMetrics { summaries, per_query })
}
