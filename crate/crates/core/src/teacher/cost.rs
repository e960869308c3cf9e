use serde::{Deserialize, Serialize};

use super::Dtype;
use crate::losses::LossConfig;

/// Embedding geometry used to size caches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub dim: usize,
    pub dtype: Dtype,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            dim: 2048,
            dtype: Dtype::F16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecacheReport {
    pub objective: String,
    pub needs_query_cache: bool,
    pub needs_document_cache: bool,
    pub query_bytes: u64,
    pub document_bytes: u64,
    pub total_bytes: u64,
    /// Decimal gigabytes (1e9 bytes).
    pub total_gb: f64,
    /// Loss evaluation cost per batch of B queries.
    pub per_step_complexity: String,
}

/// Which teacher caches an objective needs and how large their payloads are.
/// Alignment needs only query embeddings; any ranking or contrastive term
/// also needs document embeddings.
pub fn estimate_precache_cost(
    num_queries: u64,
    num_docs: u64,
    objective: &LossConfig,
    model: CostModel,
) -> PrecacheReport {
    let row = (model.dim * model.dtype.bytes()) as u64;
    let needs_docs = objective.needs_documents();
    let query_bytes = num_queries * row;
    let document_bytes = if needs_docs { num_docs * row } else { 0 };
    let total_bytes = query_bytes + document_bytes;
    PrecacheReport {
        objective: objective.label(),
        needs_query_cache: true,
        needs_document_cache: needs_docs,
        query_bytes,
        document_bytes,
        total_bytes,
        total_gb: total_bytes as f64 / 1e9,
        per_step_complexity: if needs_docs { "O(B^2)" } else { "O(B)" }.into(),
    }
}
