//! Gallery indexing and query evaluation shared by the CLI and tests.

use candle_core::{DType, Tensor};

use crate::backbone::Backbone;
use crate::error::{ClearError, Result};
use crate::eval::{retrieval_metrics, search, RankedResult, RelevanceRule, RetrievalIndex, RetrievalMetrics};
use crate::query::EmbeddingProvider;
use crate::retrieval::{encode_person, encode_query, person_search_embedding, QueryMode, RetrievalHeads};
use crate::schema::{AttributeSchema, AttributeVector};
use crate::synth::SplitData;

pub fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn build_gallery_index(backbone: &Backbone, heads: &RetrievalHeads, gallery: &SplitData) -> Result<RetrievalIndex> {
    let e = person_search_embedding(&encode_person(backbone, heads, &gallery.images)?)?;
    RetrievalIndex::build(rows_f64(&e)?, gallery.ids.clone(), gallery.labels.clone())
}

/// Distinct attribute vectors in sorted order.
pub fn distinct_queries(labels: &[AttributeVector]) -> Vec<AttributeVector> {
    let mut q = labels.to_vec();
    q.sort();
    q.dedup();
    q
}

/// Everything a query needs besides the attribute vector itself.
pub struct QueryEncoder<'a> {
    pub schema: &'a AttributeSchema,
    pub provider: &'a dyn EmbeddingProvider,
    pub heads: &'a RetrievalHeads,
    pub n_words: usize,
}

impl QueryEncoder<'_> {
    pub fn search_vector(&self, query: &AttributeVector, mode: QueryMode) -> Result<Vec<f64>> {
        encode_query(self.schema, self.provider, self.heads, query, self.n_words)?.search_vector(mode)
    }
}

/// Full rankings for each query, ids taken from the attribute bit string.
pub fn rank_queries(
    index: &RetrievalIndex,
    encoder: &QueryEncoder,
    queries: &[AttributeVector],
    mode: QueryMode,
    rule: RelevanceRule,
) -> Result<Vec<RankedResult>> {
    if queries.is_empty() {
        return Err(ClearError::Empty("no queries".into()));
    }
    queries
        .iter()
        .map(|q| {
            let v = encoder.search_vector(q, mode)?;
            search(index, &q.to_string(), &v, index.len(), Some((q, rule)))
        })
        .collect()
}

pub fn evaluate_mode(
    index: &RetrievalIndex,
    encoder: &QueryEncoder,
    queries: &[AttributeVector],
    mode: QueryMode,
    rule: RelevanceRule,
) -> Result<RetrievalMetrics> {
    retrieval_metrics(&rank_queries(index, encoder, queries, mode, rule)?)
}
