//! Gallery index, cosine search and retrieval metrics.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{ClearError, Result};
use crate::schema::AttributeVector;

/// Row-normalized gallery embeddings with their image ids and attributes.
#[derive(Debug, Clone)]
pub struct RetrievalIndex {
    dim: usize,
    rows: Vec<Vec<f64>>,
    ids: Vec<String>,
    attrs: Vec<AttributeVector>,
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(ClearError::DegenerateEmbedding(format!("gallery embedding norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl RetrievalIndex {
    /// Rows keep the input order.
    pub fn build(embeddings: Vec<Vec<f64>>, ids: Vec<String>, attrs: Vec<AttributeVector>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(ClearError::Empty("gallery is empty".into()));
        }
        if embeddings.len() != ids.len() || ids.len() != attrs.len() {
            return Err(ClearError::DimMismatch(format!(
                "{} embeddings, {} ids, {} attribute vectors",
                embeddings.len(),
                ids.len(),
                attrs.len()
            )));
        }
        let dim = embeddings[0].len();
        if embeddings.iter().any(|e| e.len() != dim) {
            return Err(ClearError::DimMismatch("gallery rows differ in width".into()));
        }
        let rows = embeddings.iter().map(|e| normalize(e)).collect::<Result<Vec<_>>>()?;
        Ok(RetrievalIndex { dim, rows, ids, attrs })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.ids[i]
    }

    pub fn attrs(&self, i: usize) -> &AttributeVector {
        &self.attrs[i]
    }

    /// Every row scored and ordered by descending score, ties by ascending id.
    pub fn rank_all(&self, query: &[f64]) -> Result<Vec<(usize, f64)>> {
        if query.len() != self.dim {
            return Err(ClearError::DimMismatch(format!(
                "query width {} vs index width {}",
                query.len(),
                self.dim
            )));
        }
        let q = normalize(query)?;
        let mut scored: Vec<(usize, f64)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (i, r.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then_with(|| self.ids[a.0].cmp(&self.ids[b.0]))
        });
        Ok(scored)
    }
}

/// When a gallery item counts as a hit for a query.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelevanceRule {
    /// Every attribute must agree.
    #[default]
    Exact,
    /// Every attribute set in the query must be set in the gallery item.
    Subset,
}

pub fn relevance(query: &AttributeVector, gallery: &AttributeVector, rule: RelevanceRule) -> bool {
    match rule {
        RelevanceRule::Exact => query == gallery,
        RelevanceRule::Subset => query.len() == gallery.len() && query.active().all(|i| gallery.get(i)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// (image id, score) in rank order.
    pub ranking: Vec<(String, f64)>,
    pub relevant: Vec<bool>,
}

impl RankedResult {
    pub fn n_relevant(&self) -> usize {
        self.relevant.iter().filter(|r| **r).count()
    }
}

/// Top-`k` results; `relevant` is filled from `rule` when a query vector is given.
pub fn search(
    index: &RetrievalIndex,
    query_id: &str,
    query_embedding: &[f64],
    k: usize,
    query_attrs: Option<(&AttributeVector, RelevanceRule)>,
) -> Result<RankedResult> {
    if k == 0 {
        return Err(ClearError::Config("k must be at least 1".into()));
    }
    let ranked = index.rank_all(query_embedding)?;
    let top = &ranked[..k.min(ranked.len())];
    Ok(RankedResult {
        query_id: query_id.to_string(),
        ranking: top.iter().map(|&(i, s)| (index.id(i).to_string(), s)).collect(),
        relevant: top
            .iter()
            .map(|&(i, _)| query_attrs.is_some_and(|(q, rule)| relevance(q, index.attrs(i), rule)))
            .collect(),
    })
}

/// Average precision over a full relevance sequence; `None` when nothing is relevant.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

/// Results with at least one relevant item, and the number dropped.
fn retained(results: &[RankedResult]) -> Result<(Vec<&RankedResult>, usize)> {
    if results.is_empty() {
        return Err(ClearError::Empty("no retrieval results".into()));
    }
    let kept: Vec<&RankedResult> = results.iter().filter(|r| r.n_relevant() > 0).collect();
    if kept.is_empty() {
        return Err(ClearError::Empty("no query has a relevant gallery item".into()));
    }
    let dropped = results.len() - kept.len();
    Ok((kept, dropped))
}

/// Mean AP over queries with at least one relevant item. Each result must
/// hold the full ranking.
pub fn metric_map(results: &[RankedResult]) -> Result<f64> {
    let (kept, _) = retained(results)?;
    Ok(kept.iter().map(|r| average_precision(&r.relevant).expect("retained")).sum::<f64>() / kept.len() as f64)
}

/// Fraction of retained queries with a relevant item in the top `k`.
pub fn metric_rank_k(results: &[RankedResult], k: usize) -> Result<f64> {
    let (kept, _) = retained(results)?;
    let hits = kept.iter().filter(|r| r.relevant.iter().take(k).any(|x| *x)).count();
    Ok(hits as f64 / kept.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "R1")]
    pub r1: f64,
    #[serde(rename = "R5")]
    pub r5: f64,
    #[serde(rename = "R10")]
    pub r10: f64,
    pub excluded_queries: usize,
}

pub fn retrieval_metrics(results: &[RankedResult]) -> Result<RetrievalMetrics> {
    let (_, excluded) = retained(results)?;
    Ok(RetrievalMetrics {
        map: metric_map(results)?,
        r1: metric_rank_k(results, 1)?,
        r5: metric_rank_k(results, 5)?,
        r10: metric_rank_k(results, 10)?,
        excluded_queries: excluded,
    })
}

#[derive(Serialize)]
struct ResultLine<'a> {
    query_id: &'a str,
    topk: Vec<(&'a str, f64)>,
}

/// One JSON line per query: `{"query_id": ..., "topk": [[image_id, score], ...]}`.
pub fn results_jsonl(results: &[RankedResult], k: usize) -> Result<String> {
    let mut out = String::new();
    for r in results {
        let line = ResultLine {
            query_id: &r.query_id,
            topk: r.ranking.iter().take(k).map(|(id, s)| (id.as_str(), *s)).collect(),
        };
        out.push_str(&serde_json::to_string(&line)?);
        out.push('\n');
    }
    Ok(out)
}
