//! Dual-level retrieval.
//!
//! A query is decomposed into low-level (entity) and high-level (relation or
//! theme) keywords. Low-level keywords match nodes and pull in their
//! incident edges; high-level keywords match edges and pull in their
//! endpoints. The union is refined by the add/remove coverage loop
//! ([`refine_set`]) and rendered into a token-budgeted [`ContextBundle`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine, ChatRequest, Gateway, GatewayError, Message, Purpose};
use crate::prompts;
use crate::store::{
    chunk_group_key, edge_key, node_key, normalize_name, EdgeId, Granularity, GraphStore, IndexKind, StoreError,
};
use crate::tokens::count_tokens;

pub const NODE_EDGE_BUDGET: usize = 8192;
pub const CHUNK_BUDGET: usize = 12288;
pub const REPRESENTATION_BUDGET: usize = 28672;

pub const SECTION_ENTITIES: &str = "-----Entities-----";
pub const SECTION_RELATIONSHIPS: &str = "-----Relationships-----";
pub const SECTION_SOURCES: &str = "-----Sources-----";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("store is empty")]
    EmptyStore,
    #[error("query decomposition failed: {0}")]
    DecompositionFailed(String),
    #[error("query must not be empty")]
    EmptyQuery,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Fuzzy,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k_low: usize,
    pub k_high: usize,
    pub match_mode: MatchMode,
    /// Extra spellings generated per low-level keyword.
    pub expansion_cap: usize,
    pub refine: bool,
    pub refine_max_iters: usize,
    pub refine_epsilon: f64,
    /// Size of the initial set handed to the refinement loop.
    pub refine_pool: usize,
    pub node_edge_budget: usize,
    pub chunk_budget: usize,
    pub representation_budget: usize,
    pub temperature: f32,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k_low: 20,
            k_high: 20,
            match_mode: MatchMode::Fuzzy,
            expansion_cap: 8,
            refine: true,
            refine_max_iters: 16,
            refine_epsilon: 1e-9,
            refine_pool: 64,
            node_edge_budget: NODE_EDGE_BUDGET,
            chunk_budget: CHUNK_BUDGET,
            representation_budget: REPRESENTATION_BUDGET,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRepresentation {
    pub original_query: String,
    pub low_level_keywords: Vec<String>,
    pub high_level_keywords: Vec<String>,
    pub low_vectors: Vec<Vec<f32>>,
    pub high_vectors: Vec<Vec<f32>>,
    pub representation_token_budget: usize,
    /// True when built from the raw query after a failed decomposition.
    pub fallback: bool,
}

impl QueryRepresentation {
    /// Embeds the given keyword lists. Keywords beyond the token budget are dropped.
    pub fn build(
        gateway: &Gateway,
        query: &str,
        low: Vec<String>,
        high: Vec<String>,
        budget: usize,
    ) -> Result<Self, RetrievalError> {
        let mut used = 0usize;
        let mut fits = |k: &String| {
            let t = count_tokens(k);
            (used + t <= budget).then(|| used += t).is_some()
        };
        let low: Vec<String> = low.into_iter().filter(|k| fits(k)).collect();
        let high: Vec<String> = high.into_iter().filter(|k| fits(k)).collect();
        let all: Vec<String> = low.iter().chain(&high).cloned().collect();
        let mut vectors = if all.is_empty() { Vec::new() } else { gateway.embed(&all)? };
        let high_vectors = vectors.split_off(low.len());
        Ok(Self {
            original_query: query.to_string(),
            low_level_keywords: low,
            high_level_keywords: high,
            low_vectors: vectors,
            high_vectors,
            representation_token_budget: budget,
            fallback: false,
        })
    }

    pub fn keyword_vectors(&self) -> Vec<Vec<f32>> {
        self.low_vectors.iter().chain(&self.high_vectors).cloned().collect()
    }

    pub fn token_count(&self) -> usize {
        self.low_level_keywords.iter().chain(&self.high_level_keywords).map(|k| count_tokens(k)).sum()
    }
}

#[derive(Deserialize)]
struct KeywordReply {
    #[serde(default)]
    low_level_keywords: Vec<String>,
    #[serde(default)]
    high_level_keywords: Vec<String>,
}

/// Parses the keyword JSON object out of a completion.
pub fn parse_keywords(completion: &str) -> Result<(Vec<String>, Vec<String>), RetrievalError> {
    let start = completion.find('{');
    let end = completion.rfind('}');
    let (Some(start), Some(end)) = (start, end) else {
        return Err(RetrievalError::DecompositionFailed("no JSON object in completion".into()));
    };
    if end < start {
        return Err(RetrievalError::DecompositionFailed("no JSON object in completion".into()));
    }
    let reply: KeywordReply = serde_json::from_str(&completion[start..=end])
        .map_err(|e| RetrievalError::DecompositionFailed(e.to_string()))?;
    let clean = |v: Vec<String>| -> Vec<String> {
        let mut seen = BTreeSet::new();
        v.into_iter()
            .map(|k| k.split_whitespace().collect::<Vec<_>>().join(" "))
            .filter(|k| !k.is_empty() && seen.insert(k.clone()))
            .collect()
    };
    let (low, high) = (clean(reply.low_level_keywords), clean(reply.high_level_keywords));
    if low.is_empty() && high.is_empty() {
        return Err(RetrievalError::DecompositionFailed("both keyword lists are empty".into()));
    }
    Ok((low, high))
}

fn split_letter_digit(s: &str) -> String {
    let mut out = String::new();
    let mut prev: Option<char> = None;
    for c in s.chars() {
        if let Some(p) = prev {
            let boundary = (p.is_alphabetic() && c.is_ascii_digit()) || (p.is_ascii_digit() && c.is_alphabetic());
            if boundary && !crate::tokens::is_cjk(p) && !crate::tokens::is_cjk(c) {
                out.push(' ');
            }
        }
        out.push(c);
        prev = Some(c);
    }
    out
}

/// Alternative spellings of an entity keyword, at most `cap`, excluding the
/// keyword itself: letter/digit spacing, joined and hyphenated forms,
/// parenthetical parts, and singular/plural of the last word.
pub fn expand_keyword(keyword: &str, cap: usize) -> Vec<String> {
    let base = keyword.split_whitespace().collect::<Vec<_>>().join(" ");
    let mut candidates =
        vec![split_letter_digit(&base), base.replace(' ', ""), base.replace(' ', "-"), base.replace('-', " ")];
    if let (Some(open), Some(close)) = (base.find('('), base.rfind(')')) {
        if open < close {
            candidates.push(base[..open].trim().to_string());
            candidates.push(base[open + 1..close].trim().to_string());
        }
    }
    if base.chars().all(|c| !crate::tokens::is_cjk(c)) && base.chars().last().is_some_and(char::is_alphabetic) {
        if let Some(stem) = base.strip_suffix("es").filter(|s| s.ends_with(['s', 'x', 'z', 'h'])) {
            candidates.push(stem.to_string());
        } else if let Some(stem) = base.strip_suffix('s').filter(|s| !s.ends_with('s')) {
            candidates.push(stem.to_string());
        } else {
            candidates.push(format!("{base}s"));
        }
    }
    let mut seen = BTreeSet::from([base.clone()]);
    candidates.into_iter().filter(|c| !c.is_empty() && seen.insert(c.clone())).take(cap).collect()
}

pub fn keyword_messages(query: &str) -> Vec<Message> {
    vec![Message::user(prompts::render(prompts::QUERY_KEYWORDS, &[("query", query)]))]
}

/// Asks the model for keyword lists and embeds them, expanding low-level keys.
pub fn decompose_query(
    gateway: &Gateway,
    query: &str,
    config: &RetrievalConfig,
) -> Result<QueryRepresentation, RetrievalError> {
    if query.trim().is_empty() {
        return Err(RetrievalError::EmptyQuery);
    }
    let request = ChatRequest::new(keyword_messages(query)).temperature(config.temperature).max_output_tokens(512);
    let completion = gateway.chat(Purpose::Decompose, &request, None)?;
    let (low, high) = parse_keywords(&completion)?;
    let mut expanded = low.clone();
    for k in &low {
        for v in expand_keyword(k, config.expansion_cap) {
            if !expanded.contains(&v) {
                expanded.push(v);
            }
        }
    }
    QueryRepresentation::build(gateway, query, expanded, high, config.representation_budget)
}

/// [`decompose_query`], falling back to the raw query as the only
/// low-level keyword when the completion cannot be parsed.
pub fn decompose_or_fallback(
    gateway: &Gateway,
    query: &str,
    config: &RetrievalConfig,
) -> Result<QueryRepresentation, RetrievalError> {
    match decompose_query(gateway, query, config) {
        Err(RetrievalError::DecompositionFailed(reason)) => {
            tracing::info!(%reason, "keyword decomposition failed; using raw query");
            let mut rq = QueryRepresentation::build(
                gateway,
                query,
                vec![query.trim().to_string()],
                vec![],
                config.representation_budget,
            )?;
            rq.fallback = true;
            Ok(rq)
        }
        other => other,
    }
}

fn similarity(a: &[f32], b: &[f32]) -> f64 {
    cosine(a, b).max(0.0)
}

/// Coverage distance: one minus the mean, over query keywords, of the best
/// (non-negative) cosine any element of the set reaches. Empty set: 1.
pub fn dist(elements: &[&[f32]], keywords: &[Vec<f32>]) -> f64 {
    if elements.is_empty() || keywords.is_empty() {
        return 1.0;
    }
    let mut total = 0.0;
    for q in keywords {
        let best = elements.iter().map(|e| similarity(e, q)).fold(0.0, f64::max);
        total += best;
    }
    1.0 - total / keywords.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub elements: BTreeSet<String>,
    pub dist_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineStep {
    pub added: String,
    pub removed: String,
    pub dist_before: f64,
    pub dist_after: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub initial_dist: f64,
    pub set: RetrievalSet,
    pub transcript: Vec<RefineStep>,
}

/// Per-keyword best and runner-up similarity over a set, for O(q) removal.
struct Coverage {
    best: Vec<(f64, Option<usize>)>,
    second: Vec<f64>,
}

impl Coverage {
    fn of(members: &[usize], sims: &[Vec<f64>], nq: usize) -> Self {
        let mut best = vec![(0.0, None); nq];
        let mut second = vec![0.0; nq];
        for &m in members {
            for q in 0..nq {
                let s = sims[m][q];
                if best[q].1.is_none() || s > best[q].0 {
                    if best[q].1.is_some() {
                        second[q] = best[q].0;
                    }
                    best[q] = (s, Some(m));
                } else if s > second[q] {
                    second[q] = s;
                }
            }
        }
        Self { best, second }
    }

    fn dist_without(&self, removed: usize) -> f64 {
        let total: f64 = self
            .best
            .iter()
            .zip(&self.second)
            .map(|(&(b, owner), &s)| if owner == Some(removed) { s } else { b })
            .sum();
        1.0 - total / self.best.len() as f64
    }

    fn dist_with(&self, added: &[f64]) -> f64 {
        let total: f64 = self.best.iter().zip(added).map(|(&(b, _), &a)| b.max(a)).sum();
        1.0 - total / self.best.len() as f64
    }

    fn dist(&self) -> f64 {
        1.0 - self.best.iter().map(|b| b.0).sum::<f64>() / self.best.len() as f64
    }
}

/// Add/remove refinement of a retrieval set.
///
/// Each iteration adds the candidate outside the set that minimizes
/// [`dist`], then removes the member of the enlarged set whose removal
/// minimizes it (possibly the one just added). The swap is kept only if
/// dist drops by at least `epsilon`; otherwise the loop ends. Ties go to
/// the smallest key. Candidates without a vector are ignored.
pub fn refine_set(
    initial: &BTreeSet<String>,
    candidates: &BTreeMap<String, Vec<f32>>,
    keywords: &[Vec<f32>],
    max_iters: usize,
    epsilon: f64,
) -> RefineOutcome {
    let keys: Vec<&String> = candidates.keys().collect();
    let index: BTreeMap<&str, usize> = keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let mut members: BTreeSet<usize> = initial.iter().filter_map(|k| index.get(k.as_str()).copied()).collect();
    let nq = keywords.len();

    let finish = |members: &BTreeSet<usize>, initial_dist: f64, transcript: Vec<RefineStep>, d: f64| RefineOutcome {
        initial_dist,
        set: RetrievalSet { elements: members.iter().map(|&i| keys[i].clone()).collect(), dist_value: d },
        transcript,
    };
    if nq == 0 || members.is_empty() && candidates.is_empty() {
        return finish(&members, 1.0, Vec::new(), 1.0);
    }

    let sims: Vec<Vec<f64>> =
        candidates.values().map(|v| keywords.iter().map(|q| similarity(v, q)).collect()).collect();
    let current_dist = |members: &BTreeSet<usize>| {
        if members.is_empty() {
            1.0
        } else {
            Coverage::of(&members.iter().copied().collect::<Vec<_>>(), &sims, nq).dist()
        }
    };
    let initial_dist = current_dist(&members);
    let mut d = initial_dist;
    let mut transcript = Vec::new();

    for _ in 0..max_iters {
        let list: Vec<usize> = members.iter().copied().collect();
        let cov = Coverage::of(&list, &sims, nq);
        // Ascending index order is ascending key order, so strict `<` keeps the smallest key on ties.
        let mut add: Option<(usize, f64)> = None;
        for e in (0..keys.len()).filter(|e| !members.contains(e)) {
            let de =
                if list.is_empty() { 1.0 - sims[e].iter().sum::<f64>() / nq as f64 } else { cov.dist_with(&sims[e]) };
            if add.is_none_or(|(_, best)| de < best) {
                add = Some((e, de));
            }
        }
        let Some((added, _)) = add else { break };

        let mut enlarged = list.clone();
        enlarged.push(added);
        enlarged.sort_unstable();
        let cov = Coverage::of(&enlarged, &sims, nq);
        let mut remove: Option<(usize, f64)> = None;
        for &r in &enlarged {
            let dr = if enlarged.len() == 1 { 1.0 } else { cov.dist_without(r) };
            if remove.is_none_or(|(_, best)| dr < best) {
                remove = Some((r, dr));
            }
        }
        let (removed, after) = remove.expect("enlarged set is non-empty");
        let accepted = after <= d - epsilon;
        transcript.push(RefineStep {
            added: keys[added].clone(),
            removed: keys[removed].clone(),
            dist_before: d,
            dist_after: after,
            accepted,
        });
        if !accepted {
            break;
        }
        members.insert(added);
        members.remove(&removed);
        d = after;
    }
    finish(&members, initial_dist, transcript, d)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ElementId {
    Node { id: String },
    Edge { src: String, dst: String },
}

impl ElementId {
    pub fn node(id: &str) -> Self {
        Self::Node { id: id.to_string() }
    }

    pub fn edge(id: &EdgeId) -> Self {
        Self::Edge { src: id.0.clone(), dst: id.1.clone() }
    }

    pub fn embedding_key(&self) -> String {
        match self {
            Self::Node { id } => node_key(id),
            Self::Edge { src, dst } => edge_key(src, dst),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Node { id } => id.clone(),
            Self::Edge { src, dst } => format!("{src} -> {dst}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElementKind {
    Node,
    Edge,
    Chunk,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub kind: ElementKind,
    pub id: String,
    pub score: f64,
    pub keyword: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub node_section: Vec<String>,
    pub edge_section: Vec<String>,
    pub chunk_section: Vec<String>,
    pub node_ids: Vec<String>,
    pub edge_ids: Vec<EdgeId>,
    pub chunk_ids: Vec<String>,
    pub node_edge_token_budget: usize,
    pub chunk_token_budget: usize,
    pub provenance: Vec<Provenance>,
}

fn lines_tokens(lines: &[String]) -> usize {
    lines.iter().map(|l| count_tokens(l)).sum()
}

impl ContextBundle {
    pub fn is_empty(&self) -> bool {
        self.node_section.is_empty() && self.edge_section.is_empty() && self.chunk_section.is_empty()
    }

    pub fn node_edge_tokens(&self) -> usize {
        lines_tokens(&self.node_section) + lines_tokens(&self.edge_section)
    }

    pub fn chunk_tokens(&self) -> usize {
        lines_tokens(&self.chunk_section)
    }

    pub fn sections(&self) -> [(&'static str, &[String]); 3] {
        [
            (SECTION_ENTITIES, &self.node_section),
            (SECTION_RELATIONSHIPS, &self.edge_section),
            (SECTION_SOURCES, &self.chunk_section),
        ]
    }

    /// Fixed rendering: section header lines, then one element per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (header, lines) in self.sections() {
            out.push_str(header);
            out.push('\n');
            for line in lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    pub fn token_count(&self) -> usize {
        count_tokens(&self.render())
    }
}

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn render_node(store: &GraphStore, id: &str) -> Option<String> {
    let n = store.node(id)?;
    Some(one_line(&format!("[{}] {} ({}): {}", n.node_id, n.display_name, n.entity_type, n.description)))
}

pub fn render_edge(store: &GraphStore, id: &EdgeId) -> Option<String> {
    let e = store.edge(&id.0, &id.1)?;
    let name = |n: &str| store.node(n).map_or(n.to_string(), |n| n.display_name.clone());
    Some(one_line(&format!(
        "[{} -> {}] {} -> {}: {} (keywords: {}; weight: {})",
        e.src,
        e.dst,
        name(&e.src),
        name(&e.dst),
        e.description,
        e.keywords.join(", "),
        e.weight
    )))
}

pub fn render_chunk(store: &GraphStore, chunk_id: &str) -> Option<String> {
    store.chunk(chunk_id).map(|c| one_line(&format!("[{}] {}", c.chunk_id, c.text)))
}

#[derive(Debug, Clone, PartialEq)]
struct Hit {
    score: f64,
    keyword: String,
}

/// Everything [`retrieve`] computed, for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalOutcome {
    pub bundle: ContextBundle,
    /// Matched elements before refinement and budgeting.
    pub matched: Vec<ElementId>,
    /// Elements surviving refinement, in rank order.
    pub survivors: Vec<ElementId>,
    pub refinement: Option<RefineOutcome>,
}

fn offer(hits: &mut BTreeMap<ElementId, Hit>, id: ElementId, score: f64, keyword: &str) {
    let entry = hits.entry(id).or_insert(Hit { score, keyword: keyword.to_string() });
    if score > entry.score {
        *entry = Hit { score, keyword: keyword.to_string() };
    }
}

fn keyword_similarity(store: &GraphStore, id: &ElementId, q: &[f32]) -> f64 {
    store.vector(&id.embedding_key()).map_or(0.0, |v| similarity(v, q))
}

/// Nodes matched by one low-level keyword.
fn match_nodes(
    store: &GraphStore,
    keyword: &str,
    vector: &[f32],
    config: &RetrievalConfig,
) -> Result<Vec<(String, f64)>, RetrievalError> {
    match config.match_mode {
        MatchMode::Exact => {
            let id = normalize_name(keyword);
            Ok(store.node(&id).map(|_| vec![(id, 1.0)]).unwrap_or_default())
        }
        MatchMode::Fuzzy => match store.granularity() {
            Granularity::PerEntity => Ok(store
                .knn(vector, config.k_low, IndexKind::Node)?
                .into_iter()
                .filter_map(|(key, s)| key.strip_prefix("n:").map(|id| (id.to_string(), s)))
                .collect()),
            Granularity::Concatenated => {
                let mut out: BTreeMap<String, f64> = BTreeMap::new();
                for (key, s) in store.knn(vector, config.k_low, IndexKind::ChunkGroup)? {
                    let chunk = key.strip_prefix("c:").unwrap_or(&key);
                    debug_assert_eq!(chunk_group_key(chunk), key);
                    for node in store.nodes_in_chunk(chunk) {
                        let e = out.entry(node.node_id.clone()).or_insert(s);
                        *e = e.max(s);
                    }
                }
                Ok(out.into_iter().collect())
            }
        },
    }
}

fn match_edges(
    store: &GraphStore,
    keyword: &str,
    vector: &[f32],
    config: &RetrievalConfig,
) -> Result<Vec<(EdgeId, f64)>, RetrievalError> {
    match config.match_mode {
        MatchMode::Exact => {
            let needle = normalize_name(keyword);
            Ok(store
                .edges()
                .filter(|e| e.keywords.iter().any(|k| normalize_name(k) == needle))
                .map(|e| (e.edge_id(), 1.0))
                .collect())
        }
        MatchMode::Fuzzy => Ok(store
            .knn(vector, config.k_high, IndexKind::Edge)?
            .into_iter()
            .filter_map(|(key, s)| {
                let (src, dst) = key.strip_prefix("e:")?.split_once('|')?;
                Some(((src.to_string(), dst.to_string()), s))
            })
            .collect()),
    }
}

/// Matched elements of both levels with their best score and keyword.
fn collect_matches(
    rq: &QueryRepresentation,
    store: &GraphStore,
    config: &RetrievalConfig,
) -> Result<BTreeMap<ElementId, Hit>, RetrievalError> {
    let mut hits = BTreeMap::new();
    for (keyword, vector) in rq.low_level_keywords.iter().zip(&rq.low_vectors) {
        let nodes = match_nodes(store, keyword, vector, config)?;
        let ids: BTreeSet<String> = nodes.iter().map(|(id, _)| id.clone()).collect();
        for (id, score) in nodes {
            offer(&mut hits, ElementId::node(&id), score, keyword);
        }
        let (edges, _) = store.neighborhood(&ids);
        for e in edges {
            let id = ElementId::edge(&e);
            let s = keyword_similarity(store, &id, vector);
            offer(&mut hits, id, s, keyword);
        }
    }
    for (keyword, vector) in rq.high_level_keywords.iter().zip(&rq.high_vectors) {
        let edges = match_edges(store, keyword, vector, config)?;
        let ids: BTreeSet<EdgeId> = edges.iter().map(|(id, _)| id.clone()).collect();
        for (id, score) in edges {
            offer(&mut hits, ElementId::edge(&id), score, keyword);
        }
        for n in store.endpoints(&ids) {
            let id = ElementId::node(&n);
            let s = keyword_similarity(store, &id, vector);
            offer(&mut hits, id, s, keyword);
        }
    }
    Ok(hits)
}

fn rank<'a>(hits: impl Iterator<Item = (&'a ElementId, &'a Hit)>) -> Vec<(&'a ElementId, &'a Hit)> {
    let mut ranked: Vec<_> = hits.collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then_with(|| a.0.cmp(b.0)));
    ranked
}

/// Elements matched before refinement and budgeting, sorted.
pub fn matched_elements(
    rq: &QueryRepresentation,
    store: &GraphStore,
    config: &RetrievalConfig,
) -> Result<Vec<ElementId>, RetrievalError> {
    Ok(collect_matches(rq, store, config)?.into_keys().collect())
}

pub fn retrieve(
    rq: &QueryRepresentation,
    store: &GraphStore,
    config: &RetrievalConfig,
) -> Result<ContextBundle, RetrievalError> {
    retrieve_detailed(rq, store, config).map(|o| o.bundle)
}

pub fn retrieve_detailed(
    rq: &QueryRepresentation,
    store: &GraphStore,
    config: &RetrievalConfig,
) -> Result<RetrievalOutcome, RetrievalError> {
    if store.stats().nodes == 0 {
        return Err(RetrievalError::EmptyStore);
    }
    let hits = collect_matches(rq, store, config)?;
    let matched: Vec<ElementId> = hits.keys().cloned().collect();

    let mut refinement = None;
    let survivors: Vec<(&ElementId, &Hit)> = if config.refine && !hits.is_empty() {
        let ranked = rank(hits.iter());
        let by_key: BTreeMap<String, &ElementId> = hits.keys().map(|id| (id.embedding_key(), id)).collect();
        let candidates: BTreeMap<String, Vec<f32>> =
            by_key.keys().filter_map(|k| store.vector(k).map(|v| (k.clone(), v.to_vec()))).collect();
        let initial: BTreeSet<String> = ranked
            .iter()
            .map(|(id, _)| id.embedding_key())
            .filter(|k| candidates.contains_key(k))
            .take(config.refine_pool)
            .collect();
        let outcome =
            refine_set(&initial, &candidates, &rq.keyword_vectors(), config.refine_max_iters, config.refine_epsilon);
        let keep: BTreeSet<&ElementId> = outcome
            .set
            .elements
            .iter()
            .map(|k| by_key[k])
            .chain(by_key.iter().filter(|(k, _)| !candidates.contains_key(*k)).map(|(_, id)| *id))
            .collect();
        refinement = Some(outcome);
        ranked.into_iter().filter(|(id, _)| keep.contains(id)).collect()
    } else {
        rank(hits.iter())
    };

    let mut bundle = ContextBundle {
        node_edge_token_budget: config.node_edge_budget,
        chunk_token_budget: config.chunk_budget,
        ..Default::default()
    };
    let mut used = 0usize;
    for (id, hit) in &survivors {
        let (line, kind, label) = match id {
            ElementId::Node { id: n } => (render_node(store, n), ElementKind::Node, n.clone()),
            ElementId::Edge { src, dst } => {
                (render_edge(store, &(src.clone(), dst.clone())), ElementKind::Edge, id.label())
            }
        };
        let Some(line) = line else { continue };
        let t = count_tokens(&line);
        if used + t > config.node_edge_budget {
            break;
        }
        used += t;
        match id {
            ElementId::Node { id: n } => {
                bundle.node_section.push(line);
                bundle.node_ids.push(n.clone());
            }
            ElementId::Edge { src, dst } => {
                bundle.edge_section.push(line);
                bundle.edge_ids.push((src.clone(), dst.clone()));
            }
        }
        bundle.provenance.push(Provenance { kind, id: label, score: hit.score, keyword: hit.keyword.clone() });
    }

    // Chunk score: sum of supporting element scores; ties by max supporting weight, then id.
    let mut chunk_scores: BTreeMap<&str, (f64, f64, &str)> = BTreeMap::new();
    for (id, hit) in &survivors {
        let (refs, weight) = match id {
            ElementId::Node { id } => match store.node(id) {
                Some(n) => (&n.chunk_refs, n.weight),
                None => continue,
            },
            ElementId::Edge { src, dst } => match store.edge(src, dst) {
                Some(e) => (&e.chunk_refs, e.weight),
                None => continue,
            },
        };
        for r in refs {
            let entry = chunk_scores.entry(r.as_str()).or_insert((0.0, f64::MIN, hit.keyword.as_str()));
            entry.0 += hit.score;
            entry.1 = entry.1.max(weight);
        }
    }
    let mut chunks: Vec<(&str, (f64, f64, &str))> = chunk_scores.into_iter().collect();
    chunks.sort_by(|a, b| b.1 .0.total_cmp(&a.1 .0).then_with(|| b.1 .1.total_cmp(&a.1 .1)).then_with(|| a.0.cmp(b.0)));
    let mut used = 0usize;
    for (chunk_id, (score, _, keyword)) in chunks {
        let Some(line) = render_chunk(store, chunk_id) else { continue };
        let t = count_tokens(&line);
        if used + t > config.chunk_budget {
            break;
        }
        used += t;
        bundle.chunk_section.push(line);
        bundle.chunk_ids.push(chunk_id.to_string());
        bundle.provenance.push(Provenance {
            kind: ElementKind::Chunk,
            id: chunk_id.to_string(),
            score,
            keyword: keyword.to_string(),
        });
    }

    Ok(RetrievalOutcome {
        bundle,
        matched,
        survivors: survivors.into_iter().map(|(id, _)| id.clone()).collect(),
        refinement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{seeded_hash_vector, EmbeddingMode, FixtureEntry, HashEmbedder, ScriptedProvider};
    use crate::ingestion::Chunk;
    use crate::store::{EntityNode, RelationEdge};

    fn v(text: &str) -> Vec<f32> {
        seeded_hash_vector(text, 16)
    }

    #[test]
    fn dist_edge_cases() {
        let q = vec![v("q1"), v("q2")];
        assert_eq!(dist(&[], &q), 1.0);
        let perfect = vec![v("k"); 3];
        let e = v("k");
        assert!(dist(&[&e], &perfect).abs() < 1e-6);
    }

    #[test]
    fn dist_matches_direct_recomputation() {
        let elements: Vec<Vec<f32>> = (0..6).map(|i| v(&format!("e{i}"))).collect();
        let keywords = vec![v("q0"), v("q1")];
        let refs: Vec<&[f32]> = elements.iter().map(Vec::as_slice).collect();
        let mut total = 0.0;
        for q in &keywords {
            let mut best = 0.0f64;
            for e in &elements {
                let mut dot = 0.0f64;
                for i in 0..16 {
                    dot += e[i] as f64 * q[i] as f64;
                }
                best = best.max(dot);
            }
            total += best;
        }
        assert!((dist(&refs, &keywords) - (1.0 - total / 2.0)).abs() < 1e-9);
    }

    fn candidates(keys: &[&str]) -> BTreeMap<String, Vec<f32>> {
        keys.iter().map(|k| (k.to_string(), v(k))).collect()
    }

    #[test]
    fn zero_iterations_returns_initial() {
        let c = candidates(&["a", "b", "c"]);
        let init: BTreeSet<String> = ["a".to_string()].into();
        let out = refine_set(&init, &c, &[v("b")], 0, 1e-9);
        assert_eq!(out.set.elements, init);
        assert!(out.transcript.is_empty());
    }

    #[test]
    fn optimal_initial_is_kept_after_one_rejected_step() {
        let c = candidates(&["a", "b", "c"]);
        let init: BTreeSet<String> = ["b".to_string()].into();
        let out = refine_set(&init, &c, &[v("b")], 16, 1e-9);
        assert_eq!(out.set.elements, init);
        assert_eq!(out.transcript.len(), 1);
        assert!(!out.transcript[0].accepted);
    }

    #[test]
    fn refinement_swaps_in_the_covering_element() {
        let c = candidates(&["a", "b", "c"]);
        let init: BTreeSet<String> = ["a".to_string()].into();
        let out = refine_set(&init, &c, &[v("c")], 16, 1e-9);
        assert_eq!(out.set.elements, BTreeSet::from(["c".to_string()]));
        assert!(out.set.dist_value < out.initial_dist);
        assert!(out.transcript[0].accepted);
        assert_eq!(out.transcript[0].removed, "a");
    }

    #[test]
    fn keyword_parsing() {
        let (low, high) = parse_keywords(
            r#"Sure: {"low_level_keywords": ["Zhefu 802", "parent", "parent"], "high_level_keywords": ["height comparison"]}"#,
        )
        .unwrap();
        assert_eq!(low, vec!["Zhefu 802", "parent"]);
        assert_eq!(high, vec!["height comparison"]);
        assert!(parse_keywords("The question asks about plant height.").is_err());
        assert!(parse_keywords(r#"{"low_level_keywords": [], "high_level_keywords": []}"#).is_err());
        assert!(parse_keywords("} {").is_err());
    }

    #[test]
    fn expansion_variants() {
        let v = expand_keyword("Zhefu802", 8);
        assert!(v.contains(&"Zhefu 802".to_string()), "{v:?}");
        let v = expand_keyword("Zhefu 802", 8);
        assert!(v.contains(&"Zhefu802".to_string()) && v.contains(&"Zhefu-802".to_string()));
        assert!(!v.contains(&"Zhefu 802".to_string()));
        let v = expand_keyword("rice varieties", 8);
        assert!(v.contains(&"rice varietie".to_string()) || v.contains(&"rice variety".to_string()) || !v.is_empty());
        assert_eq!(expand_keyword("Indica (xian)", 8)[..].iter().filter(|s| *s == "Indica" || *s == "xian").count(), 2);
        assert!(expand_keyword("Zhefu 802", 1).len() <= 1);
    }

    fn chunk(id: &str, text: &str) -> Chunk {
        Chunk {
            chunk_id: id.into(),
            doc_id: "d".into(),
            ordinal: 0,
            text: text.into(),
            token_count: count_tokens(text),
            char_span: (0, text.chars().count()),
        }
    }

    fn zhefu_store(embedder: HashEmbedder) -> (GraphStore, Gateway) {
        let gw = Gateway::scripted(ScriptedProvider::default().with_embedder(embedder));
        let mut s = GraphStore::new(Granularity::PerEntity);
        s.insert_chunk(chunk("c1", "Zhefu 802 is an early indica rice bred from Simiao 8."));
        s.insert_chunk(chunk("c2", "Simiao 8 is a tall variety."));
        let mut n = EntityNode::new("Zhefu 802", "organism/variety", "Zhefu 802 is an early indica rice.");
        n.chunk_refs.insert("c1".into());
        s.upsert_node(n).unwrap();
        let mut n = EntityNode::new("Simiao 8", "organism/variety", "Simiao 8 is a tall variety.");
        n.chunk_refs.extend(["c1".to_string(), "c2".to_string()]);
        s.upsert_node(n).unwrap();
        let mut e =
            RelationEdge::new("Zhefu 802", "Simiao 8", "Zhefu 802 was bred from Simiao 8.", &["parent".into()], 5.0);
        e.chunk_refs.insert("c1".into());
        s.upsert_edge(e).unwrap();
        s.refresh_embeddings(&gw).unwrap();
        (s, gw)
    }

    fn rq(gw: &Gateway, low: &[&str], high: &[&str]) -> QueryRepresentation {
        QueryRepresentation::build(
            gw,
            "q",
            low.iter().map(|s| s.to_string()).collect(),
            high.iter().map(|s| s.to_string()).collect(),
            REPRESENTATION_BUDGET,
        )
        .unwrap()
    }

    #[test]
    fn exact_name_hit_brings_edges_and_chunks() {
        let (s, gw) = zhefu_store(HashEmbedder::default());
        let config = RetrievalConfig { match_mode: MatchMode::Exact, ..Default::default() };
        let b = retrieve(&rq(&gw, &["Zhefu 802"], &[]), &s, &config).unwrap();
        assert!(b.node_ids.contains(&"zhefu 802".to_string()));
        assert_eq!(b.edge_ids, vec![("zhefu 802".to_string(), "simiao 8".to_string())]);
        assert_eq!(b.chunk_ids, vec!["c1"]);
        assert!(b.render().starts_with(SECTION_ENTITIES));
    }

    #[test]
    fn near_miss_spelling_fuzzy_vs_exact() {
        let embedder = HashEmbedder { dimension: 256, mode: EmbeddingMode::CharTrigram };
        let (s, gw) = zhefu_store(embedder);
        let exact = RetrievalConfig { match_mode: MatchMode::Exact, ..Default::default() };
        let fuzzy = RetrievalConfig { k_low: 1, ..Default::default() };
        let q = rq(&gw, &["zhefu802"], &[]);
        assert!(retrieve(&q, &s, &exact).unwrap().is_empty());
        let b = retrieve(&q, &s, &fuzzy).unwrap();
        assert_eq!(b.node_ids[0], "zhefu 802");
    }

    #[test]
    fn tiny_budgets_are_respected() {
        let (s, gw) = zhefu_store(HashEmbedder::default());
        let config = RetrievalConfig { node_edge_budget: 30, chunk_budget: 30, ..Default::default() };
        let b = retrieve(&rq(&gw, &["Zhefu 802", "Simiao 8"], &["parent"]), &s, &config).unwrap();
        assert!(b.node_edge_tokens() <= 30);
        assert!(b.chunk_tokens() <= 30);
        let ids: BTreeSet<_> = b.node_ids.iter().collect();
        assert_eq!(ids.len(), b.node_ids.len());
    }

    #[test]
    fn empty_store_is_an_error() {
        let gw = Gateway::scripted(ScriptedProvider::default());
        let s = GraphStore::new(Granularity::PerEntity);
        assert!(matches!(
            retrieve(&rq(&gw, &["x"], &[]), &s, &RetrievalConfig::default()),
            Err(RetrievalError::EmptyStore)
        ));
    }

    #[test]
    fn decomposition_falls_back_to_raw_query() {
        let gw = Gateway::scripted(ScriptedProvider::new(vec![FixtureEntry::when_user(
            "-Question-",
            "The user wants to compare heights.",
        )]));
        let config = RetrievalConfig::default();
        assert!(matches!(decompose_query(&gw, "How tall?", &config), Err(RetrievalError::DecompositionFailed(_))));
        let rq = decompose_or_fallback(&gw, "How tall?", &config).unwrap();
        assert!(rq.fallback);
        assert_eq!(rq.low_level_keywords, vec!["How tall?"]);
        assert!(rq.high_level_keywords.is_empty());
        assert!(matches!(decompose_query(&gw, " ", &config), Err(RetrievalError::EmptyQuery)));
    }

    #[test]
    fn decomposition_expands_low_level_keys() {
        let gw = Gateway::scripted(ScriptedProvider::new(vec![FixtureEntry::when_user(
            "-Question-",
            r#"{"low_level_keywords": ["Zhefu 802", "parent"], "high_level_keywords": ["height comparison"]}"#,
        )]));
        let rq =
            decompose_query(&gw, "How much taller is Zhefu 802 than its parent?", &RetrievalConfig::default()).unwrap();
        assert!(rq.low_level_keywords.starts_with(&["Zhefu 802".to_string(), "parent".to_string()]));
        assert!(rq.low_level_keywords.contains(&"Zhefu802".to_string()));
        assert_eq!(rq.high_level_keywords, vec!["height comparison"]);
        assert_eq!(rq.low_vectors.len(), rq.low_level_keywords.len());
        let budgeted =
            decompose_query(&gw, "q", &RetrievalConfig { representation_budget: 3, ..Default::default() }).unwrap();
        assert!(budgeted.token_count() <= 3);
    }

    #[test]
    fn concatenated_granularity_matches_via_chunks() {
        let gw = Gateway::scripted(ScriptedProvider::default());
        let mut s = GraphStore::new(Granularity::Concatenated);
        s.insert_chunk(chunk("c1", "x"));
        let mut n = EntityNode::new("Zhefu 802", "organism/variety", "d.");
        n.chunk_refs.insert("c1".into());
        s.upsert_node(n).unwrap();
        s.refresh_embeddings(&gw).unwrap();
        let b = retrieve(&rq(&gw, &["Zhefu 802"], &[]), &s, &RetrievalConfig::default()).unwrap();
        assert_eq!(b.node_ids, vec!["zhefu 802"]);
    }
}
