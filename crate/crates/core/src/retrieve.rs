//! Related-example retrieval: rank stored goal types by cosine similarity to
//! the query type and pack the best ones into a token budget.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{CorpusError, DefinitionRecord, DependenceGraph, Split, SplitAssignment};
use crate::embed::{self, EmbedError, EmbeddingProvider, EmbeddingVector};
use crate::lang::Tokenizer;

const INDEX_MAGIC: &[u8; 4] = b"RIX1";

#[derive(Debug, Error)]
pub enum RetrieveError {
    #[error("cannot build an index over an empty corpus")]
    EmptyCorpus,
    #[error("record `{id}`: {source}")]
    Embedding { id: String, source: EmbedError },
    #[error("query embedding failed: {0}")]
    Query(EmbedError),
    #[error("unknown record `{0}`")]
    UnknownRecord(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("index cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub record_id: String,
    pub similarity: f64,
    pub type_text: String,
    pub body_text: String,
    pub token_cost: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalStrategy {
    /// Only records from training files.
    #[default]
    TrainOnly,
    /// Records from any file that does not depend on the query's file.
    NonDependent,
}

impl RetrievalStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalStrategy::TrainOnly => "train_only",
            RetrievalStrategy::NonDependent => "non_dependent",
        }
    }
}

#[derive(Debug, Clone)]
struct IndexEntry {
    record_id: String,
    type_text: String,
    body_text: String,
    token_cost: usize,
    vector: EmbeddingVector,
}

/// Immutable similarity index over goal types.
pub struct RetrievalIndex {
    provider: Arc<dyn EmbeddingProvider>,
    entries: Vec<IndexEntry>,
}

impl std::fmt::Debug for RetrievalIndex {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RetrievalIndex")
            .field("provider", &self.provider.id())
            .field("len", &self.entries.len())
            .finish()
    }
}

fn entry_texts(rec: &DefinitionRecord, tokenizer: &dyn Tokenizer) -> (String, String, usize) {
    let type_text = rec.goal_type.clone();
    let body_text = rec.definition_text();
    let cost = tokenizer.count(&type_text) + tokenizer.count(&body_text);
    (type_text, body_text, cost)
}

pub fn build_index(
    records: &[DefinitionRecord],
    provider: Arc<dyn EmbeddingProvider>,
    tokenizer: &dyn Tokenizer,
) -> Result<RetrievalIndex, RetrieveError> {
    if records.is_empty() {
        return Err(RetrieveError::EmptyCorpus);
    }
    let mut entries = Vec::with_capacity(records.len());
    for chunk in records.chunks(64) {
        let texts: Vec<&str> = chunk.iter().map(|r| r.goal_type.as_str()).collect();
        let vectors = match provider.embed_batch(&texts) {
            Ok(v) => v,
            // redo one by one to attach the failing record id
            Err(_) => chunk
                .iter()
                .map(|r| {
                    provider
                        .embed_text(&r.goal_type)
                        .map_err(|source| RetrieveError::Embedding { id: r.id.clone(), source })
                })
                .collect::<Result<_, _>>()?,
        };
        for (rec, vector) in chunk.iter().zip(vectors) {
            let (type_text, body_text, token_cost) = entry_texts(rec, tokenizer);
            entries.push(IndexEntry { record_id: rec.id.clone(), type_text, body_text, token_cost, vector });
        }
    }
    Ok(RetrievalIndex { provider, entries })
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn provider(&self) -> &Arc<dyn EmbeddingProvider> {
        &self.provider
    }

    /// Eligible entries ranked by descending similarity, ties by ascending id.
    pub fn rank(
        &self,
        query_type: &str,
        eligible_ids: &BTreeSet<String>,
    ) -> Result<Vec<RetrievalHit>, RetrieveError> {
        let query = self.provider.embed_text(query_type).map_err(RetrieveError::Query)?;
        let mut hits = Vec::new();
        for e in self.entries.iter().filter(|e| eligible_ids.contains(&e.record_id)) {
            let similarity = embed::cosine(&query, &e.vector).map_err(RetrieveError::Query)?;
            hits.push(RetrievalHit {
                record_id: e.record_id.clone(),
                similarity,
                type_text: e.type_text.clone(),
                body_text: e.body_text.clone(),
                token_cost: e.token_cost,
            });
        }
        hits.sort_by(|a, b| {
            b.similarity.total_cmp(&a.similarity).then_with(|| a.record_id.cmp(&b.record_id))
        });
        Ok(hits)
    }

    /// Ranked hits packed greedily into `budget_tokens`: a hit that does not
    /// fit is skipped and the scan continues.
    pub fn retrieve_related(
        &self,
        query_type: &str,
        eligible_ids: &BTreeSet<String>,
        budget_tokens: usize,
    ) -> Result<Vec<RetrievalHit>, RetrieveError> {
        if budget_tokens == 0 {
            return Ok(Vec::new());
        }
        Ok(pack(self.rank(query_type, eligible_ids)?, budget_tokens))
    }

    /// Saves the vectors together with a hash of everything they were built from.
    pub fn save(&self, path: &Path, records: &[DefinitionRecord]) -> Result<(), RetrieveError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(INDEX_MAGIC);
        buf.extend_from_slice(&content_hash(records, self.provider.as_ref()));
        buf.extend_from_slice(&(self.provider.dimension() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            buf.extend_from_slice(&(e.record_id.len() as u64).to_le_bytes());
            buf.extend_from_slice(e.record_id.as_bytes());
            for v in e.vector.values() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    /// Loads a cached index, or `None` if the cache is missing or stale.
    pub fn load(
        path: &Path,
        records: &[DefinitionRecord],
        provider: Arc<dyn EmbeddingProvider>,
        tokenizer: &dyn Tokenizer,
    ) -> Result<Option<RetrievalIndex>, RetrieveError> {
        let Ok(bytes) = fs::read(path) else { return Ok(None) };
        let mut cur = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        let mut hash = [0u8; 32];
        if cur.read_exact(&mut magic).is_err() || &magic != INDEX_MAGIC {
            return Err(RetrieveError::Cache("bad magic".into()));
        }
        cur.read_exact(&mut hash).map_err(|e| RetrieveError::Cache(e.to_string()))?;
        if hash != content_hash(records, provider.as_ref()) {
            return Ok(None);
        }
        let read_u64 = |cur: &mut Cursor<Vec<u8>>| -> Result<u64, RetrieveError> {
            let mut b = [0u8; 8];
            cur.read_exact(&mut b).map_err(|e| RetrieveError::Cache(e.to_string()))?;
            Ok(u64::from_le_bytes(b))
        };
        let dim = read_u64(&mut cur)? as usize;
        let count = read_u64(&mut cur)? as usize;
        let by_id: HashMap<&str, &DefinitionRecord> =
            records.iter().map(|r| (r.id.as_str(), r)).collect();
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let len = read_u64(&mut cur)? as usize;
            let mut id = vec![0u8; len];
            cur.read_exact(&mut id).map_err(|e| RetrieveError::Cache(e.to_string()))?;
            let id = String::from_utf8(id).map_err(|e| RetrieveError::Cache(e.to_string()))?;
            let values = (0..dim)
                .map(|_| read_u64(&mut cur).map(f64::from_bits))
                .collect::<Result<Vec<_>, _>>()?;
            let rec = by_id.get(id.as_str()).ok_or_else(|| RetrieveError::UnknownRecord(id.clone()))?;
            let (type_text, body_text, token_cost) = entry_texts(rec, tokenizer);
            entries.push(IndexEntry {
                record_id: id,
                type_text,
                body_text,
                token_cost,
                vector: EmbeddingVector::new(values),
            });
        }
        Ok(Some(RetrievalIndex { provider, entries }))
    }

    /// Loads the cache at `path` when fresh, otherwise rebuilds and rewrites it.
    pub fn load_or_build(
        path: &Path,
        records: &[DefinitionRecord],
        provider: Arc<dyn EmbeddingProvider>,
        tokenizer: &dyn Tokenizer,
    ) -> Result<RetrievalIndex, RetrieveError> {
        if let Some(index) = Self::load(path, records, provider.clone(), tokenizer)? {
            return Ok(index);
        }
        let index = build_index(records, provider, tokenizer)?;
        index.save(path, records)?;
        Ok(index)
    }
}

fn content_hash(records: &[DefinitionRecord], provider: &dyn EmbeddingProvider) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(provider.id().as_bytes());
    for r in records {
        h.update([0u8]);
        h.update(r.id.as_bytes());
        h.update([0u8]);
        h.update(r.goal_type.as_bytes());
    }
    h.finalize().into()
}

/// Greedy skip-and-continue packing of ranked hits.
pub fn pack(ranked: Vec<RetrievalHit>, budget_tokens: usize) -> Vec<RetrievalHit> {
    let mut left = budget_tokens;
    ranked
        .into_iter()
        .filter(|h| {
            let fits = h.token_cost <= left;
            if fits {
                left -= h.token_cost;
            }
            fits
        })
        .collect()
}

/// Ids of records the query may draw examples from.
pub fn eligible(
    strategy: RetrievalStrategy,
    splits: &SplitAssignment,
    graph: &DependenceGraph,
    query_id: &str,
    records: &[DefinitionRecord],
) -> Result<BTreeSet<String>, RetrieveError> {
    let query = records
        .iter()
        .find(|r| r.id == query_id)
        .ok_or_else(|| RetrieveError::UnknownRecord(query_id.to_string()))?;
    let others = records.iter().filter(|r| r.id != query.id);
    Ok(match strategy {
        RetrievalStrategy::TrainOnly => others
            .filter(|r| splits.split_of(&r.file) == Some(Split::Train))
            .map(|r| r.id.clone())
            .collect(),
        RetrievalStrategy::NonDependent => {
            let excluded = graph.dependents_closure(&query.file)?;
            others.filter(|r| !excluded.contains(&r.file)).map(|r| r.id.clone()).collect()
        }
    })
}
