//! Persistent graph store: entity nodes, relation edges, chunks and their
//! embeddings, with exact cosine k-NN and a digest-checked on-disk layout.
//!
//! Layout of a dumped store directory:
//!
//! | file                 | content                                             |
//! |----------------------|-----------------------------------------------------|
//! | `manifest.json`      | version, dimension, granularity, counts, digests    |
//! | `nodes.jsonl`        | one [`EntityNode`] per line, sorted by id           |
//! | `edges.jsonl`        | one [`RelationEdge`] per line, sorted by (src, dst) |
//! | `chunks.jsonl`       | one [`Chunk`] per line, sorted by id                |
//! | `vectors.bin`        | row-major little-endian f32, one row per key        |
//! | `vectors.keys.jsonl` | the embedding key of each row, as a JSON string     |

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{cosine, Gateway, GatewayError};
use crate::ingestion::Chunk;

pub const STORE_VERSION: u32 = 1;
/// Joins description fragments of merged nodes and edges.
pub const DESCRIPTION_SEPARATOR: &str = " | ";
pub const MAX_EDGE_WEIGHT: f64 = 100.0;

const EMBED_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("edge endpoint {0:?} does not exist")]
    MissingEndpoint(String),
    #[error("index for {0:?} is empty")]
    EmptyIndex(IndexKind),
    #[error("store version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt store: {0}")]
    CorruptManifest(String),
    #[error("vector dimension mismatch: index has {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("store write failed: {0}")]
    StoreWrite(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub type Result<T> = std::result::Result<T, StoreError>;

/// Casefold, trim, and collapse internal whitespace.
pub fn normalize_name(name: &str) -> String {
    name.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn node_key(node_id: &str) -> String {
    format!("n:{node_id}")
}

pub fn edge_key(src: &str, dst: &str) -> String {
    format!("e:{src}|{dst}")
}

pub fn chunk_group_key(chunk_id: &str) -> String {
    format!("c:{chunk_id}")
}

pub type EdgeId = (String, String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub node_id: String,
    pub display_name: String,
    pub entity_type: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub weight: f64,
    pub chunk_refs: BTreeSet<String>,
    pub embedding_key: String,
}

impl EntityNode {
    pub fn new(display_name: &str, entity_type: &str, description: &str) -> Self {
        let node_id = normalize_name(display_name);
        Self {
            embedding_key: node_key(&node_id),
            node_id,
            display_name: display_name.split_whitespace().collect::<Vec<_>>().join(" "),
            entity_type: entity_type.trim().to_string(),
            description: canonical_description([description]),
            keywords: Vec::new(),
            weight: 0.0,
            chunk_refs: BTreeSet::new(),
        }
    }

    /// Text embedded for this node: `name: description`.
    pub fn embedding_text(&self) -> String {
        if self.description.is_empty() {
            self.display_name.clone()
        } else {
            format!("{}: {}", self.display_name, self.description)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationEdge {
    pub src: String,
    pub dst: String,
    pub description: String,
    pub keywords: Vec<String>,
    pub weight: f64,
    pub chunk_refs: BTreeSet<String>,
    pub embedding_key: String,
}

impl RelationEdge {
    pub fn new(src: &str, dst: &str, description: &str, keywords: &[String], weight: f64) -> Self {
        let (src, dst) = (normalize_name(src), normalize_name(dst));
        Self {
            embedding_key: edge_key(&src, &dst),
            src,
            dst,
            description: canonical_description([description]),
            keywords: canonical_keywords(keywords.iter().map(String::as_str)),
            weight: quantize_weight(weight).min(MAX_EDGE_WEIGHT),
            chunk_refs: BTreeSet::new(),
        }
    }

    pub fn edge_id(&self) -> EdgeId {
        (self.src.clone(), self.dst.clone())
    }
}

/// Weights live on a 1/1000 grid so sums are exact and order independent.
pub fn quantize_weight(w: f64) -> f64 {
    if w.is_finite() {
        (w * 1000.0).round() / 1000.0
    } else {
        0.0
    }
}

fn add_weights(a: f64, b: f64) -> f64 {
    let milli = (a * 1000.0).round() as i64 + (b * 1000.0).round() as i64;
    (milli as f64 / 1000.0).min(MAX_EDGE_WEIGHT)
}

fn split_sentences(fragment: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    let mut chars = fragment.chars().peekable();
    while let Some(c) = chars.next() {
        current.push(c);
        let cjk_end = matches!(c, '。' | '！' | '？');
        let latin_end = matches!(c, '.' | '!' | '?') && chars.peek().is_none_or(|n| n.is_whitespace());
        if cjk_end || latin_end {
            out.push(std::mem::take(&mut current));
        }
    }
    out.push(current);
    out.into_iter().map(|s| s.split_whitespace().collect::<Vec<_>>().join(" ")).filter(|s| !s.is_empty()).collect()
}

/// Sentence-level union of description fragments, sorted, joined by
/// [`DESCRIPTION_SEPARATOR`]. Independent of fragment order and idempotent.
pub fn canonical_description<'a>(fragments: impl IntoIterator<Item = &'a str>) -> String {
    let sentences: BTreeSet<String> =
        fragments.into_iter().flat_map(|f| f.split(DESCRIPTION_SEPARATOR)).flat_map(split_sentences).collect();
    sentences.into_iter().collect::<Vec<_>>().join(DESCRIPTION_SEPARATOR)
}

pub fn canonical_keywords<'a>(keywords: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let set: BTreeSet<String> = keywords
        .into_iter()
        .map(|k| k.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|k| !k.is_empty())
        .collect();
    set.into_iter().collect()
}

const UNKNOWN_TYPE: &str = "unknown";

fn merge_type(a: &str, b: &str) -> String {
    match (a.is_empty() || a == UNKNOWN_TYPE, b.is_empty() || b == UNKNOWN_TYPE) {
        (true, true) => UNKNOWN_TYPE.to_string(),
        (true, false) => b.to_string(),
        (false, true) => a.to_string(),
        (false, false) => a.min(b).to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[derive(Default)]
pub enum Granularity {
    /// Nodes matched through one vector per chunk of its joined entity names.
    Concatenated,
    /// One vector per node.
    #[default]
    PerEntity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexKind {
    Node,
    Edge,
    /// Per-chunk entity-list vectors (concatenated granularity).
    ChunkGroup,
}

impl IndexKind {
    fn prefix(self) -> &'static str {
        match self {
            IndexKind::Node => "n:",
            IndexKind::Edge => "e:",
            IndexKind::ChunkGroup => "c:",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpsertOutcome {
    Created,
    Merged,
    /// Self-loop after normalization; not stored.
    Dropped,
}

#[derive(Debug, Default)]
pub struct StoreMetrics {
    pub self_loops_dropped: AtomicU64,
    pub unknown_ids_skipped: AtomicU64,
}

impl Clone for StoreMetrics {
    fn clone(&self) -> Self {
        Self {
            self_loops_dropped: AtomicU64::new(self.self_loops_dropped.load(Ordering::Relaxed)),
            unknown_ids_skipped: AtomicU64::new(self.unknown_ids_skipped.load(Ordering::Relaxed)),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct StoreStats {
    pub nodes: usize,
    pub edges: usize,
    pub chunks: usize,
}

#[derive(Debug, Clone, Default)]
pub struct GraphStore {
    nodes: BTreeMap<String, EntityNode>,
    edges: BTreeMap<EdgeId, RelationEdge>,
    chunks: BTreeMap<String, Chunk>,
    vectors: BTreeMap<String, Vec<f32>>,
    dimension: Option<usize>,
    granularity: Granularity,
    pending: BTreeSet<String>,
    adjacency: BTreeMap<String, BTreeSet<EdgeId>>,
    metrics: Arc<StoreMetrics>,
}

impl PartialEq for GraphStore {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes
            && self.edges == other.edges
            && self.chunks == other.chunks
            && self.vectors == other.vectors
            && self.dimension == other.dimension
            && self.granularity == other.granularity
            && self.pending == other.pending
    }
}

impl GraphStore {
    pub fn new(granularity: Granularity) -> Self {
        Self { granularity, ..Default::default() }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn stats(&self) -> StoreStats {
        StoreStats { nodes: self.nodes.len(), edges: self.edges.len(), chunks: self.chunks.len() }
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty() && self.edges.is_empty() && self.chunks.is_empty()
    }

    pub fn metrics(&self) -> &StoreMetrics {
        &self.metrics
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn node(&self, node_id: &str) -> Option<&EntityNode> {
        self.nodes.get(node_id)
    }

    pub fn edge(&self, src: &str, dst: &str) -> Option<&RelationEdge> {
        self.edges.get(&(src.to_string(), dst.to_string()))
    }

    pub fn chunk(&self, chunk_id: &str) -> Option<&Chunk> {
        self.chunks.get(chunk_id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &EntityNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> impl Iterator<Item = &RelationEdge> {
        self.edges.values()
    }

    pub fn chunks(&self) -> impl Iterator<Item = &Chunk> {
        self.chunks.values()
    }

    pub fn has_chunk(&self, chunk_id: &str) -> bool {
        self.chunks.contains_key(chunk_id)
    }

    pub fn vector(&self, embedding_key: &str) -> Option<&[f32]> {
        self.vectors.get(embedding_key).map(Vec::as_slice)
    }

    /// Embedding keys whose text changed since the last refresh.
    pub fn pending_embeddings(&self) -> &BTreeSet<String> {
        &self.pending
    }

    pub fn insert_chunk(&mut self, chunk: Chunk) {
        self.chunks.insert(chunk.chunk_id.clone(), chunk);
    }

    fn mark_groups(&mut self, refs: &BTreeSet<String>) {
        if self.granularity == Granularity::Concatenated {
            for r in refs {
                self.pending.insert(chunk_group_key(r));
            }
        }
    }

    pub fn upsert_node(&mut self, node: EntityNode) -> Result<UpsertOutcome> {
        let node_id = node.node_id.clone();
        let refs = node.chunk_refs.clone();
        let outcome = match self.nodes.get_mut(&node_id) {
            None => {
                self.pending.insert(node.embedding_key.clone());
                self.nodes.insert(node_id, node);
                UpsertOutcome::Created
            }
            Some(existing) => {
                let before = existing.embedding_text();
                let name_before = existing.display_name.clone();
                existing.display_name = existing.display_name.clone().min(node.display_name);
                existing.entity_type = merge_type(&existing.entity_type, &node.entity_type);
                existing.description =
                    canonical_description([existing.description.as_str(), node.description.as_str()]);
                existing.keywords =
                    canonical_keywords(existing.keywords.iter().chain(&node.keywords).map(String::as_str));
                existing.weight = existing.weight.max(node.weight);
                existing.chunk_refs.extend(node.chunk_refs);
                if existing.embedding_text() != before {
                    self.pending.insert(existing.embedding_key.clone());
                }
                if existing.display_name != name_before {
                    let all = existing.chunk_refs.clone();
                    self.mark_groups(&all);
                    // Edge texts render display names.
                    for id in self.adjacency.get(&node_id).cloned().unwrap_or_default() {
                        self.pending.insert(edge_key(&id.0, &id.1));
                    }
                }
                UpsertOutcome::Merged
            }
        };
        self.mark_groups(&refs);
        Ok(outcome)
    }

    pub fn upsert_edge(&mut self, edge: RelationEdge) -> Result<UpsertOutcome> {
        if edge.src == edge.dst {
            self.metrics.self_loops_dropped.fetch_add(1, Ordering::Relaxed);
            return Ok(UpsertOutcome::Dropped);
        }
        for end in [&edge.src, &edge.dst] {
            if !self.nodes.contains_key(end) {
                return Err(StoreError::MissingEndpoint(end.clone()));
            }
        }
        let id = edge.edge_id();
        match self.edges.get_mut(&id) {
            None => {
                self.pending.insert(edge.embedding_key.clone());
                self.adjacency.entry(edge.src.clone()).or_default().insert(id.clone());
                self.adjacency.entry(edge.dst.clone()).or_default().insert(id.clone());
                self.edges.insert(id, edge);
                Ok(UpsertOutcome::Created)
            }
            Some(existing) => {
                let before = (existing.description.clone(), existing.keywords.clone());
                existing.description =
                    canonical_description([existing.description.as_str(), edge.description.as_str()]);
                existing.keywords =
                    canonical_keywords(existing.keywords.iter().chain(&edge.keywords).map(String::as_str));
                existing.weight = add_weights(existing.weight, edge.weight);
                existing.chunk_refs.extend(edge.chunk_refs);
                if (existing.description.clone(), existing.keywords.clone()) != before {
                    self.pending.insert(existing.embedding_key.clone());
                }
                Ok(UpsertOutcome::Merged)
            }
        }
    }

    fn edge_embedding_text(&self, edge: &RelationEdge) -> String {
        let name = |id: &str| self.nodes.get(id).map_or(id.to_string(), |n| n.display_name.clone());
        let mut text = format!("{} -> {}: {}", name(&edge.src), name(&edge.dst), edge.description);
        if !edge.keywords.is_empty() {
            text.push(' ');
            text.push_str(&edge.keywords.join(", "));
        }
        text
    }

    fn group_embedding_text(&self, chunk_id: &str) -> Option<String> {
        let names: BTreeSet<&str> =
            self.nodes.values().filter(|n| n.chunk_refs.contains(chunk_id)).map(|n| n.display_name.as_str()).collect();
        (!names.is_empty()).then(|| names.into_iter().collect::<Vec<_>>().join("; "))
    }

    /// Text that `key` should be embedded from, if the keyed element exists.
    pub fn embedding_text(&self, key: &str) -> Option<String> {
        if let Some(id) = key.strip_prefix("n:") {
            self.nodes.get(id).map(EntityNode::embedding_text)
        } else if let Some(rest) = key.strip_prefix("e:") {
            let (src, dst) = rest.split_once('|')?;
            self.edge(src, dst).map(|e| self.edge_embedding_text(e))
        } else if let Some(chunk) = key.strip_prefix("c:") {
            self.group_embedding_text(chunk)
        } else {
            None
        }
    }

    pub fn insert_vector(&mut self, key: &str, vector: Vec<f32>) -> Result<()> {
        match self.dimension {
            Some(d) if d != vector.len() => {
                return Err(StoreError::DimensionMismatch { expected: d, got: vector.len() })
            }
            None => self.dimension = Some(vector.len()),
            _ => {}
        }
        self.vectors.insert(key.to_string(), vector);
        self.pending.remove(key);
        Ok(())
    }

    /// Embeds every pending key; returns how many vectors were written.
    pub fn refresh_embeddings(&mut self, gateway: &Gateway) -> Result<usize> {
        let mut work = Vec::new();
        for key in std::mem::take(&mut self.pending) {
            match self.embedding_text(&key) {
                Some(text) => work.push((key, text)),
                None => {
                    self.vectors.remove(&key);
                }
            }
        }
        let mut written = 0;
        for batch in work.chunks(EMBED_BATCH) {
            let texts: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
            let vectors = match gateway.embed(&texts) {
                Ok(v) => v,
                Err(e) => {
                    self.pending.extend(work.iter().map(|(k, _)| k.clone()));
                    return Err(e.into());
                }
            };
            for ((key, _), vector) in batch.iter().zip(vectors) {
                self.insert_vector(key, vector)?;
                written += 1;
            }
        }
        Ok(written)
    }

    /// Exact top-`k` by cosine, descending; ties by ascending key.
    pub fn knn(&self, query: &[f32], k: usize, kind: IndexKind) -> Result<Vec<(String, f64)>> {
        let prefix = kind.prefix();
        let mut scored: Vec<(String, f64)> = self
            .vectors
            .range(prefix.to_string()..)
            .take_while(|(key, _)| key.starts_with(prefix))
            .map(|(key, v)| (key.clone(), cosine(query, v)))
            .collect();
        if scored.is_empty() {
            return Err(StoreError::EmptyIndex(kind));
        }
        if let Some(d) = self.dimension {
            if d != query.len() {
                return Err(StoreError::DimensionMismatch { expected: d, got: query.len() });
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    fn skip_unknown(&self) {
        self.metrics.unknown_ids_skipped.fetch_add(1, Ordering::Relaxed);
    }

    /// Incident edges of `node_ids` and their other endpoints (excluding
    /// the input nodes), both sorted. Direction is ignored.
    pub fn neighborhood(&self, node_ids: &BTreeSet<String>) -> (Vec<EdgeId>, Vec<String>) {
        let mut edges = BTreeSet::new();
        let mut nodes = BTreeSet::new();
        for id in node_ids {
            if !self.nodes.contains_key(id) {
                self.skip_unknown();
                continue;
            }
            for edge in self.adjacency.get(id).into_iter().flatten() {
                edges.insert(edge.clone());
                for end in [&edge.0, &edge.1] {
                    if !node_ids.contains(end) {
                        nodes.insert(end.clone());
                    }
                }
            }
        }
        (edges.into_iter().collect(), nodes.into_iter().collect())
    }

    /// Endpoint nodes of `edge_ids`, sorted.
    pub fn endpoints(&self, edge_ids: &BTreeSet<EdgeId>) -> Vec<String> {
        let mut nodes = BTreeSet::new();
        for id in edge_ids {
            if self.edges.contains_key(id) {
                nodes.insert(id.0.clone());
                nodes.insert(id.1.clone());
            } else {
                self.skip_unknown();
            }
        }
        nodes.into_iter().collect()
    }

    /// Nodes whose chunk refs include `chunk_id`.
    pub fn nodes_in_chunk<'a>(&'a self, chunk_id: &'a str) -> impl Iterator<Item = &'a EntityNode> + 'a {
        self.nodes.values().filter(move |n| n.chunk_refs.contains(chunk_id))
    }

    /// Referential and vector integrity check.
    pub fn verify(&self) -> VerifyReport {
        let mut issues = Vec::new();
        for node in self.nodes.values() {
            if node.node_id != normalize_name(&node.display_name) {
                issues.push(format!("node {:?}: id does not match display name", node.node_id));
            }
            for r in &node.chunk_refs {
                if !self.chunks.contains_key(r) {
                    issues.push(format!("node {:?}: dangling chunk ref {r:?}", node.node_id));
                }
            }
        }
        for edge in self.edges.values() {
            for end in [&edge.src, &edge.dst] {
                if !self.nodes.contains_key(end) {
                    issues.push(format!("edge {:?}->{:?}: missing endpoint {end:?}", edge.src, edge.dst));
                }
            }
            if edge.src == edge.dst {
                issues.push(format!("edge {:?}: self loop", edge.src));
            }
            for r in &edge.chunk_refs {
                if !self.chunks.contains_key(r) {
                    issues.push(format!("edge {:?}->{:?}: dangling chunk ref {r:?}", edge.src, edge.dst));
                }
            }
        }
        let expected_keys = self
            .nodes
            .values()
            .map(|n| n.embedding_key.clone())
            .chain(self.edges.values().map(|e| e.embedding_key.clone()));
        for key in expected_keys {
            if !self.vectors.contains_key(&key) && !self.pending.contains(&key) {
                issues.push(format!("missing vector for {key:?}"));
            }
        }
        for (key, v) in &self.vectors {
            if Some(v.len()) != self.dimension {
                issues.push(format!("vector {key:?}: wrong dimension {}", v.len()));
            }
            let norm = cosine(v, v).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                issues.push(format!("vector {key:?}: norm {norm}"));
            }
            if self.embedding_text(key).is_none() {
                issues.push(format!("vector {key:?}: no owning element"));
            }
        }
        VerifyReport { stats: self.stats(), vectors: self.vectors.len(), pending: self.pending.len(), issues }
    }

    /// Writes the store; file contents depend only on store contents.
    pub fn dump(&self, dir: &Path) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|source| StoreError::Io { path: dir.into(), source })?;
        let files: Vec<(&str, Vec<u8>)> = vec![
            ("nodes.jsonl", jsonl(self.nodes.values())),
            ("edges.jsonl", jsonl(self.edges.values())),
            ("chunks.jsonl", jsonl(self.chunks.values())),
            ("vectors.bin", self.vectors.values().flat_map(|v| v.iter().flat_map(|x| x.to_le_bytes())).collect()),
            ("vectors.keys.jsonl", jsonl(self.vectors.keys())),
        ];
        let mut digests = BTreeMap::new();
        for (name, bytes) in &files {
            digests.insert(name.to_string(), hex::encode(Sha256::digest(bytes)));
            write_file(&dir.join(name), bytes)?;
        }
        let manifest = Manifest {
            version: STORE_VERSION,
            dimension: self.dimension,
            granularity: self.granularity,
            stats: self.stats(),
            vectors: self.vectors.len(),
            pending: self.pending.iter().cloned().collect(),
            digests,
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_file(&dir.join("manifest.json"), &bytes)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_bytes = read_file(&dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| StoreError::CorruptManifest(format!("manifest.json: {e}")))?;
        if manifest.version != STORE_VERSION {
            return Err(StoreError::VersionMismatch { found: manifest.version, expected: STORE_VERSION });
        }
        let mut contents = BTreeMap::new();
        for name in ["nodes.jsonl", "edges.jsonl", "chunks.jsonl", "vectors.bin", "vectors.keys.jsonl"] {
            let bytes = read_file(&dir.join(name))?;
            let expected = manifest
                .digests
                .get(name)
                .ok_or_else(|| StoreError::CorruptManifest(format!("no digest for {name}")))?;
            if &hex::encode(Sha256::digest(&bytes)) != expected {
                return Err(StoreError::CorruptManifest(format!("{name}: digest mismatch")));
            }
            contents.insert(name, bytes);
        }
        let mut store = GraphStore::new(manifest.granularity);
        store.dimension = manifest.dimension;
        for node in parse_jsonl::<EntityNode>("nodes.jsonl", &contents["nodes.jsonl"])? {
            store.nodes.insert(node.node_id.clone(), node);
        }
        for edge in parse_jsonl::<RelationEdge>("edges.jsonl", &contents["edges.jsonl"])? {
            let id = edge.edge_id();
            store.adjacency.entry(edge.src.clone()).or_default().insert(id.clone());
            store.adjacency.entry(edge.dst.clone()).or_default().insert(id.clone());
            store.edges.insert(id, edge);
        }
        for chunk in parse_jsonl::<Chunk>("chunks.jsonl", &contents["chunks.jsonl"])? {
            store.chunks.insert(chunk.chunk_id.clone(), chunk);
        }
        let keys = parse_jsonl::<String>("vectors.keys.jsonl", &contents["vectors.keys.jsonl"])?;
        let raw = &contents["vectors.bin"];
        let dim = manifest.dimension.unwrap_or(0);
        if raw.len() != keys.len() * dim * 4 {
            return Err(StoreError::CorruptManifest(format!(
                "vectors.bin holds {} bytes, expected {} rows of dimension {dim}",
                raw.len(),
                keys.len()
            )));
        }
        for (row, key) in keys.into_iter().enumerate() {
            let bytes = &raw[row * dim * 4..(row + 1) * dim * 4];
            let v = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
            store.vectors.insert(key, v);
        }
        store.pending = manifest.pending.into_iter().collect();
        if store.stats() != manifest.stats || store.vectors.len() != manifest.vectors {
            return Err(StoreError::CorruptManifest("element counts disagree with manifest".into()));
        }
        Ok(store)
    }

    /// True if `dir` holds a dumped store.
    pub fn exists(dir: &Path) -> bool {
        dir.join("manifest.json").is_file()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub dimension: Option<usize>,
    pub granularity: Granularity,
    pub stats: StoreStats,
    pub vectors: usize,
    #[serde(default)]
    pub pending: Vec<String>,
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub stats: StoreStats,
    pub vectors: usize,
    pub pending: usize,
    pub issues: Vec<String>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }
}

fn jsonl<T: Serialize>(items: impl Iterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("store element serializes");
        out.push(b'\n');
    }
    out
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(name: &str, bytes: &[u8]) -> Result<Vec<T>> {
    let text = std::str::from_utf8(bytes).map_err(|e| StoreError::CorruptManifest(format!("{name}: {e}")))?;
    text.lines()
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::CorruptManifest(format!("{name} line {}: {e}", i + 1)))
        })
        .collect()
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| StoreError::Io { path: path.into(), source })
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| StoreError::Io { path: path.into(), source })
}

/// Many readers or one writer. Readers take an immutable snapshot; a
/// writer mutates a private copy and publishes it atomically, so readers
/// never observe a partial merge.
#[derive(Clone, Default)]
pub struct SharedStore {
    current: Arc<RwLock<Arc<GraphStore>>>,
    writer: Arc<Mutex<()>>,
}

impl SharedStore {
    pub fn new(store: GraphStore) -> Self {
        Self { current: Arc::new(RwLock::new(Arc::new(store))), writer: Default::default() }
    }

    pub fn snapshot(&self) -> Arc<GraphStore> {
        self.current.read().clone()
    }

    /// Runs `f` on a copy of the store; the copy is published only if `f` succeeds.
    pub fn write<T, E>(
        &self,
        f: impl FnOnce(&mut GraphStore) -> std::result::Result<T, E>,
    ) -> std::result::Result<T, E> {
        let _guard = self.writer.lock();
        let mut working = (*self.snapshot()).clone();
        let out = f(&mut working)?;
        *self.current.write() = Arc::new(working);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{seeded_hash_vector, ScriptedProvider};

    fn node(name: &str, chunk: &str) -> EntityNode {
        let mut n = EntityNode::new(name, "variety", &format!("{name} is a rice variety."));
        n.chunk_refs.insert(chunk.into());
        n
    }

    fn chunk(id: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: "d".into(),
            ordinal: 0,
            text: format!("text of {id}"),
            token_count: 3,
            char_span: (0, 10),
        }
    }

    fn small_store() -> GraphStore {
        let mut s = GraphStore::new(Granularity::PerEntity);
        for c in ["c1", "c2"] {
            s.insert_chunk(chunk(c));
        }
        for n in ["A", "B", "C"] {
            s.upsert_node(node(n, "c1")).unwrap();
        }
        let mut e = RelationEdge::new("A", "B", "A is the parent of B.", &["parent".into()], 4.5);
        e.chunk_refs.insert("c1".into());
        s.upsert_edge(e).unwrap();
        let mut e = RelationEdge::new("B", "C", "B crossed with C.", &[], 2.0);
        e.chunk_refs.insert("c2".into());
        s.upsert_edge(e).unwrap();
        s.refresh_embeddings(&Gateway::scripted(ScriptedProvider::default())).unwrap();
        s
    }

    #[test]
    fn names_normalize() {
        assert_eq!(normalize_name("  Zhefu   802 "), "zhefu 802");
        assert_eq!(normalize_name("a "), normalize_name("A"));
    }

    #[test]
    fn descriptions_merge_by_sentence() {
        let d = canonical_description(["B is tall. A is short.", "A is short.", ""]);
        assert_eq!(d, "A is short. | B is tall.");
        assert_eq!(canonical_description([d.as_str()]), d);
        assert_eq!(canonical_description(["水稻高产。抗病。"]), "抗病。 | 水稻高产。");
    }

    #[test]
    fn upsert_node_created_then_merged() {
        let mut s = GraphStore::new(Granularity::PerEntity);
        assert_eq!(s.upsert_node(node("A", "c1")).unwrap(), UpsertOutcome::Created);
        assert_eq!(s.upsert_node(node("A", "c1")).unwrap(), UpsertOutcome::Merged);
        assert_eq!(s.stats().nodes, 1);
    }

    #[test]
    fn edge_needs_endpoints() {
        let mut s = GraphStore::new(Granularity::PerEntity);
        s.upsert_node(node("A", "c1")).unwrap();
        let err = s.upsert_edge(RelationEdge::new("A", "Z", "x", &[], 1.0)).unwrap_err();
        assert!(matches!(err, StoreError::MissingEndpoint(id) if id == "z"));
        let out = s.upsert_edge(RelationEdge::new("A", " a", "x", &[], 1.0)).unwrap();
        assert_eq!(out, UpsertOutcome::Dropped);
        assert_eq!(s.metrics().self_loops_dropped.load(Ordering::Relaxed), 1);
    }

    #[test]
    fn edge_weights_sum_with_cap() {
        let mut s = GraphStore::new(Granularity::PerEntity);
        s.upsert_node(node("A", "c1")).unwrap();
        s.upsert_node(node("B", "c1")).unwrap();
        for _ in 0..30 {
            s.upsert_edge(RelationEdge::new("A", "B", "x.", &[], 4.1)).unwrap();
        }
        assert_eq!(s.edge("a", "b").unwrap().weight, 100.0);
        let mut s2 = GraphStore::new(Granularity::PerEntity);
        s2.upsert_node(node("A", "c1")).unwrap();
        s2.upsert_node(node("B", "c1")).unwrap();
        s2.upsert_edge(RelationEdge::new("A", "B", "x.", &[], 0.1)).unwrap();
        s2.upsert_edge(RelationEdge::new("A", "B", "x.", &[], 0.2)).unwrap();
        assert_eq!(s2.edge("a", "b").unwrap().weight, 0.3);
    }

    #[test]
    fn knn_self_match_and_clamp() {
        let s = small_store();
        let q = s.vector("n:b").unwrap().to_vec();
        let hits = s.knn(&q, 10, IndexKind::Node).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].0, "n:b");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
        assert_eq!(s.knn(&q, 10, IndexKind::Edge).unwrap().len(), 2);
        let empty = GraphStore::new(Granularity::PerEntity);
        assert!(matches!(empty.knn(&q, 1, IndexKind::Node), Err(StoreError::EmptyIndex(IndexKind::Node))));
    }

    #[test]
    fn knn_ties_break_by_key() {
        let mut s = GraphStore::new(Granularity::PerEntity);
        let v = seeded_hash_vector("same", 8);
        for key in ["n:b", "n:a", "n:c"] {
            s.insert_vector(key, v.clone()).unwrap();
        }
        let keys: Vec<_> = s.knn(&v, 3, IndexKind::Node).unwrap().into_iter().map(|h| h.0).collect();
        assert_eq!(keys, vec!["n:a", "n:b", "n:c"]);
        assert!(matches!(s.insert_vector("n:d", vec![1.0; 4]), Err(StoreError::DimensionMismatch { .. })));
    }

    #[test]
    fn neighborhoods() {
        let s = small_store();
        let set = |ids: &[&str]| ids.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let (edges, nodes) = s.neighborhood(&set(&["b"]));
        assert_eq!(edges, vec![("a".into(), "b".into()), ("b".into(), "c".into())]);
        assert_eq!(nodes, vec!["a", "c"]);
        let (edges, nodes) = s.neighborhood(&set(&["zzz"]));
        assert!(edges.is_empty() && nodes.is_empty());
        assert_eq!(s.metrics().unknown_ids_skipped.load(Ordering::Relaxed), 1);
        let ends = s.endpoints(&[("a".to_string(), "b".to_string())].into_iter().collect());
        assert_eq!(ends, vec!["a", "b"]);
    }

    #[test]
    fn isolated_node_has_empty_neighborhood() {
        let mut s = GraphStore::new(Granularity::PerEntity);
        s.upsert_node(node("Lonely", "c1")).unwrap();
        let (edges, nodes) = s.neighborhood(&["lonely".to_string()].into_iter().collect());
        assert!(edges.is_empty() && nodes.is_empty());
    }

    #[test]
    fn verify_flags_dangling_refs() {
        let mut s = small_store();
        assert!(s.verify().is_ok(), "{:?}", s.verify().issues);
        s.upsert_node(node("D", "c9")).unwrap();
        let report = s.verify();
        assert!(report.issues.iter().any(|i| i.contains("dangling chunk ref")));
    }

    #[test]
    fn dump_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = small_store();
        s.dump(dir.path()).unwrap();
        let loaded = GraphStore::load(dir.path()).unwrap();
        assert_eq!(loaded, s);
        let (e1, n1) = loaded.neighborhood(&["b".to_string()].into_iter().collect());
        assert_eq!((e1, n1), s.neighborhood(&["b".to_string()].into_iter().collect()));

        let empty_dir = tempfile::tempdir().unwrap();
        let empty = GraphStore::new(Granularity::Concatenated);
        empty.dump(empty_dir.path()).unwrap();
        assert_eq!(GraphStore::load(empty_dir.path()).unwrap(), empty);
    }

    #[test]
    fn corruption_and_version_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        small_store().dump(dir.path()).unwrap();
        let path = dir.path().join("vectors.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes[5] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(GraphStore::load(dir.path()), Err(StoreError::CorruptManifest(_))));

        let dir = tempfile::tempdir().unwrap();
        small_store().dump(dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let text = fs::read_to_string(&mpath).unwrap().replace("\"version\": 1", "\"version\": 99");
        fs::write(&mpath, text).unwrap();
        assert!(matches!(GraphStore::load(dir.path()), Err(StoreError::VersionMismatch { found: 99, .. })));
    }

    #[test]
    fn dump_bytes_are_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        small_store().dump(a.path()).unwrap();
        small_store().dump(b.path()).unwrap();
        for name in ["manifest.json", "nodes.jsonl", "edges.jsonl", "chunks.jsonl", "vectors.bin", "vectors.keys.jsonl"]
        {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
        }
    }

    #[test]
    fn concatenated_granularity_indexes_chunk_groups() {
        let mut s = GraphStore::new(Granularity::Concatenated);
        s.insert_chunk(chunk("c1"));
        s.upsert_node(node("A", "c1")).unwrap();
        s.upsert_node(node("B", "c1")).unwrap();
        assert_eq!(s.embedding_text("c:c1").unwrap(), "A; B");
        s.refresh_embeddings(&Gateway::scripted(ScriptedProvider::default())).unwrap();
        let q = seeded_hash_vector("A; B", 64);
        let hits = s.knn(&q, 1, IndexKind::ChunkGroup).unwrap();
        assert_eq!(hits[0].0, "c:c1");
        assert!((hits[0].1 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shared_store_publishes_only_on_success() {
        let shared = SharedStore::new(GraphStore::default());
        let before = shared.snapshot();
        let r: std::result::Result<(), &str> = shared.write(|s| {
            s.insert_chunk(chunk("c1"));
            Err("boom")
        });
        assert!(r.is_err());
        assert!(shared.snapshot().stats().chunks == 0);
        shared
            .write::<_, ()>(|s| {
                s.insert_chunk(chunk("c1"));
                Ok(())
            })
            .unwrap();
        assert_eq!(before.stats().chunks, 0, "old snapshot unaffected");
        assert_eq!(shared.snapshot().stats().chunks, 1);
    }
}
