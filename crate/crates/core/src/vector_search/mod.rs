//! In-process vector index with an exact flat backend and an HNSW graph backend.
//!
//! Vectors are normalized on insert, so scores are plain dot products. Deletion
//! tombstones a document; tombstones are compacted away when the index is saved.
//! Hits are sorted by score descending, ties by ascending `doc_id`.

mod hnsw;
mod persist;

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embeddings::{dot, normalize, EmbeddingError, EmbeddingVector};

pub use hnsw::HnswParams;
pub use persist::{FORMAT_VERSION, MAGIC};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("doc_id {0} already present")]
    DuplicateDocId(u64),
    #[error("unknown doc_id {0}")]
    UnknownDocId(u64),
    #[error("dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("invalid index parameter {field}: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("invalid vector: {0}")]
    Vector(#[from] EmbeddingError),
    #[error("corrupt index at byte {offset}: {reason}")]
    CorruptIndex { offset: usize, reason: String },
    #[error("unsupported index file: {0}")]
    VersionMismatch(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
}

/// A metadata value: string, number or boolean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetaValue {
    Bool(bool),
    Number(serde_json::Number),
    String(String),
}

impl MetaValue {
    /// Compare against a textual value, as typed on a command line.
    pub fn matches_text(&self, text: &str) -> bool {
        match self {
            MetaValue::String(s) => s == text,
            MetaValue::Bool(b) => text.parse::<bool>() == Ok(*b),
            MetaValue::Number(n) => match (n.as_f64(), text.parse::<f64>()) {
                (Some(a), Ok(b)) => a == b,
                _ => false,
            },
        }
    }
}

impl fmt::Display for MetaValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetaValue::Bool(b) => write!(f, "{b}"),
            MetaValue::Number(n) => write!(f, "{n}"),
            MetaValue::String(s) => f.write_str(s),
        }
    }
}

impl From<&str> for MetaValue {
    fn from(s: &str) -> Self {
        MetaValue::String(s.to_string())
    }
}

impl From<bool> for MetaValue {
    fn from(b: bool) -> Self {
        MetaValue::Bool(b)
    }
}

impl From<i64> for MetaValue {
    fn from(n: i64) -> Self {
        MetaValue::Number(n.into())
    }
}

/// Flat metadata; the `BTreeMap` keeps the serialized form canonical.
pub type Metadata = BTreeMap<String, MetaValue>;

/// Parse a JSON object into metadata, rejecting nested values.
pub fn metadata_from_json(value: &serde_json::Value) -> Result<Metadata, String> {
    let obj = value.as_object().ok_or("metadata must be a JSON object")?;
    obj.iter()
        .map(|(k, v)| {
            let mv = match v {
                serde_json::Value::Bool(b) => MetaValue::Bool(*b),
                serde_json::Value::Number(n) => MetaValue::Number(n.clone()),
                serde_json::Value::String(s) => MetaValue::String(s.clone()),
                _ => return Err(format!("metadata value for {k:?} must be a string, number or boolean")),
            };
            Ok((k.clone(), mv))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedDocument {
    pub doc_id: u64,
    pub text: String,
    #[serde(default)]
    pub metadata: Metadata,
    pub vector: EmbeddingVector,
}

impl IndexedDocument {
    pub fn new(doc_id: u64, text: impl Into<String>, vector: EmbeddingVector) -> Self {
        Self { doc_id, text: text.into(), metadata: Metadata::new(), vector }
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<MetaValue>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub doc_id: u64,
    pub score: f64,
    pub text: String,
    pub metadata: Metadata,
}

/// Conjunction of `key == value` tests against document metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetadataFilter {
    pub equals: Vec<(String, String)>,
}

impl MetadataFilter {
    pub fn eq(key: impl Into<String>, value: impl Into<String>) -> Self {
        Self { equals: vec![(key.into(), value.into())] }
    }

    pub fn and(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.equals.push((key.into(), value.into()));
        self
    }

    /// Parse `key=value`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| format!("filter {spec:?} is not of the form key=value"))?;
        if k.trim().is_empty() {
            return Err(format!("filter {spec:?} has an empty key"));
        }
        Ok(Self::eq(k.trim(), v))
    }

    pub fn matches(&self, meta: &Metadata) -> bool {
        self.equals
            .iter()
            .all(|(k, v)| meta.get(k).is_some_and(|m| m.matches_text(v)))
    }
}

/// Predicate over document metadata.
pub type Filter<'a> = &'a (dyn Fn(&Metadata) -> bool + Sync);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Backend {
    Flat,
    Hnsw(HnswParams),
}

impl Backend {
    pub fn name(&self) -> &'static str {
        match self {
            Backend::Flat => "flat",
            Backend::Hnsw(_) => "hnsw",
        }
    }
}

/// The searcher interface. [`VectorIndex`] is the in-process implementation;
/// an adapter for an external vector database would implement the same trait.
pub trait VectorStore: Send + Sync {
    fn dim(&self) -> usize;
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn add(&mut self, doc: IndexedDocument) -> Result<(), SearchError>;
    fn delete(&mut self, doc_id: u64) -> Result<(), SearchError>;
    fn search(&self, query: &[f32], k: usize, filter: Option<Filter<'_>>) -> Result<Vec<SearchHit>, SearchError>;
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct StoredDoc {
    pub doc_id: u64,
    pub text: String,
    pub metadata: Metadata,
}

/// Normalized vectors laid out contiguously by ordinal.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Vectors {
    dim: usize,
    data: Vec<f32>,
}

impl Vectors {
    fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn get(&self, ordinal: u32) -> &[f32] {
        let start = ordinal as usize * self.dim;
        &self.data[start..start + self.dim]
    }

    fn push(&mut self, v: &[f32]) {
        self.data.extend_from_slice(v);
    }
}

/// Score order: higher score first, then smaller doc_id.
pub(crate) fn hit_order(a: (f64, u64), b: (f64, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

#[derive(Debug, Clone)]
enum Graph {
    Flat,
    Hnsw(hnsw::HnswGraph),
}

#[derive(Debug, Clone)]
pub struct VectorIndex {
    dim: usize,
    docs: Vec<StoredDoc>,
    vectors: Vectors,
    ordinals: HashMap<u64, u32>,
    deleted: Vec<bool>,
    live: usize,
    graph: Graph,
}

impl VectorIndex {
    pub fn new(dim: usize, backend: Backend) -> Result<Self, SearchError> {
        if dim == 0 {
            return Err(SearchError::InvalidParams { field: "dim", reason: "must be positive".into() });
        }
        let graph = match backend {
            Backend::Flat => Graph::Flat,
            Backend::Hnsw(p) => Graph::Hnsw(hnsw::HnswGraph::new(p.validate()?)),
        };
        Ok(Self {
            dim,
            docs: Vec::new(),
            vectors: Vectors::new(dim),
            ordinals: HashMap::new(),
            deleted: Vec::new(),
            live: 0,
            graph,
        })
    }

    pub fn flat(dim: usize) -> Result<Self, SearchError> {
        Self::new(dim, Backend::Flat)
    }

    pub fn hnsw(dim: usize, params: HnswParams) -> Result<Self, SearchError> {
        Self::new(dim, Backend::Hnsw(params))
    }

    pub fn backend(&self) -> Backend {
        match &self.graph {
            Graph::Flat => Backend::Flat,
            Graph::Hnsw(g) => Backend::Hnsw(g.params),
        }
    }

    /// Beam width used by HNSW queries; ignored by the flat backend.
    pub fn set_ef_search(&mut self, ef: usize) -> Result<(), SearchError> {
        if let Graph::Hnsw(g) = &mut self.graph {
            if ef == 0 {
                return Err(SearchError::InvalidParams { field: "ef_search", reason: "must be positive".into() });
            }
            g.params.ef_search = ef;
        }
        Ok(())
    }

    /// Number of stored nodes including tombstones.
    pub fn node_count(&self) -> usize {
        self.docs.len()
    }

    pub fn contains(&self, doc_id: u64) -> bool {
        self.ordinals
            .get(&doc_id)
            .is_some_and(|&o| !self.deleted[o as usize])
    }

    /// Live documents in insertion order.
    pub fn documents(&self) -> impl Iterator<Item = IndexedDocument> + '_ {
        (0..self.docs.len() as u32)
            .filter(|&o| !self.deleted[o as usize])
            .map(|o| {
                let d = &self.docs[o as usize];
                IndexedDocument {
                    doc_id: d.doc_id,
                    text: d.text.clone(),
                    metadata: d.metadata.clone(),
                    vector: EmbeddingVector::new(self.vectors.get(o).to_vec()).expect("stored vectors are finite"),
                }
            })
    }

    /// Layer-0 degree per node (HNSW only).
    pub fn layer0_degrees(&self) -> Vec<usize> {
        match &self.graph {
            Graph::Flat => Vec::new(),
            Graph::Hnsw(g) => g.degrees(0),
        }
    }

    /// Top layer of every node and the current entry point (HNSW only).
    pub fn hnsw_levels(&self) -> Option<(Vec<usize>, Option<u64>)> {
        match &self.graph {
            Graph::Flat => None,
            Graph::Hnsw(g) => Some((g.levels(), g.entry().map(|o| self.docs[o as usize].doc_id))),
        }
    }

    /// Neighbor lists of one node, by doc_id, per layer.
    pub fn hnsw_neighbors(&self, doc_id: u64) -> Option<Vec<Vec<u64>>> {
        let Graph::Hnsw(g) = &self.graph else { return None };
        let &o = self.ordinals.get(&doc_id)?;
        Some(
            g.links(o)
                .iter()
                .map(|layer| layer.iter().map(|&n| self.docs[n as usize].doc_id).collect())
                .collect(),
        )
    }

    fn check_dim(&self, got: usize) -> Result<(), SearchError> {
        if got != self.dim {
            return Err(SearchError::DimensionMismatch { expected: self.dim, got });
        }
        Ok(())
    }

    fn hit(&self, ordinal: u32, score: f64) -> SearchHit {
        let d = &self.docs[ordinal as usize];
        SearchHit { doc_id: d.doc_id, score, text: d.text.clone(), metadata: d.metadata.clone() }
    }

    fn passes(&self, ordinal: u32, filter: Option<Filter<'_>>) -> bool {
        !self.deleted[ordinal as usize] && filter.is_none_or(|f| f(&self.docs[ordinal as usize].metadata))
    }

    pub(crate) fn score(&self, query: &[f32], ordinal: u32) -> f64 {
        dot(query, self.vectors.get(ordinal)).clamp(-1.0, 1.0)
    }

    fn flat_search(&self, query: &[f32], k: usize, filter: Option<Filter<'_>>) -> Vec<(f64, u32)> {
        let mut scored: Vec<(f64, u32)> = (0..self.docs.len() as u32)
            .filter(|&o| self.passes(o, filter))
            .map(|o| (self.score(query, o), o))
            .collect();
        scored.sort_by(|a, b| hit_order((a.0, self.docs[a.1 as usize].doc_id), (b.0, self.docs[b.1 as usize].doc_id)));
        scored.truncate(k);
        scored
    }

    fn graph_search(&self, g: &hnsw::HnswGraph, query: &[f32], k: usize, filter: Option<Filter<'_>>) -> Vec<(f64, u32)> {
        let base = g.params.ef_search.max(k);
        let mut ef = base;
        loop {
            let mut found: Vec<(f64, u32)> = g
                .search(&self.vectors, query, ef)
                .into_iter()
                .filter(|&(_, o)| self.passes(o, filter))
                .collect();
            if found.len() >= k || ef >= base * 4 {
                found.sort_by(|a, b| {
                    hit_order((a.0, self.docs[a.1 as usize].doc_id), (b.0, self.docs[b.1 as usize].doc_id))
                });
                found.truncate(k);
                return found;
            }
            ef *= 2;
        }
    }

    /// Rebuild without tombstones. Flat: drop the slots. HNSW: reinsert the live
    /// documents in their original order into a fresh graph with the same parameters.
    pub fn compact(&mut self) {
        if self.live == self.docs.len() {
            return;
        }
        let docs: Vec<IndexedDocument> = self.documents().collect();
        let mut fresh = Self::new(self.dim, self.backend()).expect("parameters already validated");
        if let (Graph::Hnsw(new), Graph::Hnsw(old)) = (&mut fresh.graph, &self.graph) {
            new.params.ef_search = old.params.ef_search;
        }
        for d in docs {
            fresh.add(d).expect("live documents are unique and well-formed");
        }
        *self = fresh;
    }
}

impl VectorStore for VectorIndex {
    fn dim(&self) -> usize {
        self.dim
    }

    fn len(&self) -> usize {
        self.live
    }

    fn add(&mut self, doc: IndexedDocument) -> Result<(), SearchError> {
        self.check_dim(doc.vector.dim())?;
        if self.ordinals.contains_key(&doc.doc_id) {
            return Err(SearchError::DuplicateDocId(doc.doc_id));
        }
        let unit = normalize(doc.vector.values())?;
        let ordinal = self.docs.len() as u32;
        self.vectors.push(&unit);
        self.docs.push(StoredDoc { doc_id: doc.doc_id, text: doc.text, metadata: doc.metadata });
        self.deleted.push(false);
        self.ordinals.insert(doc.doc_id, ordinal);
        self.live += 1;
        if let Graph::Hnsw(g) = &mut self.graph {
            g.insert(&self.vectors, ordinal);
        }
        Ok(())
    }

    fn delete(&mut self, doc_id: u64) -> Result<(), SearchError> {
        match self.ordinals.get(&doc_id) {
            Some(&o) if !self.deleted[o as usize] => {
                self.deleted[o as usize] = true;
                self.live -= 1;
                Ok(())
            }
            _ => Err(SearchError::UnknownDocId(doc_id)),
        }
    }

    fn search(&self, query: &[f32], k: usize, filter: Option<Filter<'_>>) -> Result<Vec<SearchHit>, SearchError> {
        self.check_dim(query.len())?;
        if k == 0 {
            return Err(SearchError::InvalidK);
        }
        if self.live == 0 {
            return Err(SearchError::EmptyIndex);
        }
        let q = normalize(query)?;
        let ranked = match &self.graph {
            Graph::Flat => self.flat_search(&q, k, filter),
            Graph::Hnsw(g) => self.graph_search(g, &q, k, filter),
        };
        Ok(ranked.into_iter().map(|(s, o)| self.hit(o, s)).collect())
    }
}

/// Shared handle: many concurrent readers or one writer.
#[derive(Debug, Clone)]
pub struct SharedIndex(Arc<RwLock<VectorIndex>>);

impl SharedIndex {
    pub fn new(index: VectorIndex) -> Self {
        Self(Arc::new(RwLock::new(index)))
    }

    pub fn search(&self, query: &[f32], k: usize, filter: Option<Filter<'_>>) -> Result<Vec<SearchHit>, SearchError> {
        self.0.read().search(query, k, filter)
    }

    pub fn add(&self, doc: IndexedDocument) -> Result<(), SearchError> {
        self.0.write().add(doc)
    }

    pub fn delete(&self, doc_id: u64) -> Result<(), SearchError> {
        self.0.write().delete(doc_id)
    }

    pub fn len(&self) -> usize {
        self.0.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.0.read().dim()
    }

    pub fn backend(&self) -> Backend {
        self.0.read().backend()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), SearchError> {
        self.0.write().save(path)
    }

    pub fn read(&self) -> parking_lot::RwLockReadGuard<'_, VectorIndex> {
        self.0.read()
    }
}
