//! Loop NER over chunks and incremental merge of extractions into the graph.
//!
//! Extraction output is line-delimited:
//!
//! ```text
//! ("entity"|name|type|description)
//! ("relation"|subject|relation|object|description|keywords|weight)
//! ("relation"|subject|object|description|keywords|weight)
//! ```
//!
//! The six-field relation form carries no relation label; its first keyword
//! is used instead (or `related_to`).

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, Purpose};
use crate::ingestion::Chunk;
use crate::prompts::{self, COMPLETION_DELIMITER};
use crate::store::{normalize_name, quantize_weight, EntityNode, GraphStore, RelationEdge, StoreError, UpsertOutcome};

pub const DEFAULT_ENTITY_TYPES: &[&str] =
    &["organism/variety", "trait", "location", "person", "organization", "method", "metric", "time"];

const UNKNOWN_TYPE: &str = "unknown";
const DEFAULT_RELATION: &str = "related_to";

fn type_example(entity_type: &str) -> Option<&'static str> {
    Some(match entity_type {
        "organism/variety" => r#"("entity"|Zhefu 802|organism/variety|Zhefu 802 is an early indica rice variety.)"#,
        "trait" => r#"("entity"|plant height|trait|Plant height is measured from soil to panicle tip.)"#,
        "location" => r#"("entity"|Zhejiang|location|Zhejiang is a province in eastern China.)"#,
        "person" => r#"("entity"|Marie Curie|person|Marie Curie was a physicist and chemist.)"#,
        "organization" => {
            r#"("entity"|China National Rice Research Institute|organization|A national institute for rice research.)"#
        }
        "method" => r#"("entity"|backcrossing|method|Backcrossing crosses a hybrid with one of its parents.)"#,
        "metric" => r#"("entity"|yield per hectare|metric|Grain yield per hectare of planted area.)"#,
        "time" => r#"("entity"|1898|time|The year 1898.)"#,
        _ => return None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NerStrategy {
    /// Judge first; extract again only on an affirmative verdict.
    Trial,
    /// Extract again first, then judge.
    Base,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    JudgeNo,
    MaxRounds,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NerConfig {
    pub strategy: NerStrategy,
    pub max_rounds: usize,
    pub entity_types: Vec<String>,
    pub temperature: f32,
    pub max_output_tokens: usize,
}

impl Default for NerConfig {
    fn default() -> Self {
        Self {
            strategy: NerStrategy::Base,
            max_rounds: 2,
            entity_types: DEFAULT_ENTITY_TYPES.iter().map(|s| s.to_string()).collect(),
            temperature: 0.0,
            max_output_tokens: 2048,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityRecord {
    pub name: String,
    pub entity_type: String,
    pub description: String,
    pub chunk_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionRecord {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub entity_types: (String, String),
    pub keywords: Vec<String>,
    pub description: String,
    pub weight: f64,
    pub chunk_id: String,
}

impl ExtractionRecord {
    fn triple_key(&self) -> (String, String, String) {
        (normalize_name(&self.subject), normalize_name(&self.relation), normalize_name(&self.object))
    }
}

/// Parsed records of one completion.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedExtraction {
    pub entities: Vec<EntityRecord>,
    pub records: Vec<ExtractionRecord>,
    pub parse_failures: usize,
}

fn clean_field(field: &str) -> String {
    field.trim().trim_matches('"').split_whitespace().collect::<Vec<_>>().join(" ")
}

fn vocabulary_type(raw: &str, vocabulary: &[String]) -> String {
    let lowered = raw.trim().to_lowercase();
    vocabulary.iter().find(|t| t.to_lowercase() == lowered).cloned().unwrap_or_else(|| UNKNOWN_TYPE.to_string())
}

enum Line {
    Entity(EntityRecord),
    Relation(ExtractionRecord),
}

fn parse_line(line: &str, chunk_id: &str, vocabulary: &[String]) -> Option<Line> {
    let inner = line.trim().trim_end_matches(',').strip_prefix('(')?.strip_suffix(')')?;
    let fields: Vec<&str> = inner.split('|').collect();
    let nonempty = |s: &str| (!normalize_name(s).is_empty()).then(|| clean_field(s));
    match (clean_field(fields[0]).as_str(), fields.len()) {
        ("entity", 4) => Some(Line::Entity(EntityRecord {
            name: nonempty(fields[1])?,
            entity_type: vocabulary_type(fields[2], vocabulary),
            description: clean_field(fields[3]),
            chunk_id: chunk_id.to_string(),
        })),
        ("relation", 6) | ("relation", 7) => {
            let labelled = fields.len() == 7;
            let (subject, object) = (nonempty(fields[1])?, nonempty(fields[if labelled { 3 } else { 2 }])?);
            let rest = &fields[if labelled { 4 } else { 3 }..];
            let keywords: Vec<String> = rest[1].split(',').map(clean_field).filter(|k| !k.is_empty()).collect();
            let relation = if labelled {
                nonempty(fields[2])?
            } else {
                keywords.first().cloned().unwrap_or_else(|| DEFAULT_RELATION.to_string())
            };
            let weight: f64 = clean_field(rest[2]).parse().ok().filter(|w: &f64| w.is_finite())?;
            Some(Line::Relation(ExtractionRecord {
                subject,
                relation,
                object,
                entity_types: (UNKNOWN_TYPE.into(), UNKNOWN_TYPE.into()),
                keywords,
                description: clean_field(rest[0]),
                weight: quantize_weight(weight.clamp(0.0, 10.0)),
                chunk_id: chunk_id.to_string(),
            }))
        }
        _ => None,
    }
}

/// Parses one completion. Blank lines and the completion delimiter are
/// skipped; every other line that is not a well-formed record counts as a
/// parse failure.
pub fn parse_extraction(completion: &str, chunk_id: &str, vocabulary: &[String]) -> ParsedExtraction {
    let mut out = ParsedExtraction::default();
    for line in completion.lines() {
        let line = line.trim();
        if line.is_empty() || line == COMPLETION_DELIMITER {
            continue;
        }
        let line = line.strip_suffix(COMPLETION_DELIMITER).unwrap_or(line).trim();
        match parse_line(line, chunk_id, vocabulary) {
            Some(Line::Entity(e)) => out.entities.push(e),
            Some(Line::Relation(r)) => out.records.push(r),
            None => out.parse_failures += 1,
        }
    }
    out
}

/// Renders records back into the line format.
pub fn render_records(entities: &[EntityRecord], records: &[ExtractionRecord]) -> String {
    let mut lines: Vec<String> =
        entities.iter().map(|e| format!("(\"entity\"|{}|{}|{})", e.name, e.entity_type, e.description)).collect();
    lines.extend(records.iter().map(|r| {
        format!(
            "(\"relation\"|{}|{}|{}|{}|{}|{})",
            r.subject,
            r.relation,
            r.object,
            r.description,
            r.keywords.join(", "),
            r.weight
        )
    }));
    lines.join("\n")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NerHistory {
    pub chunk_id: String,
    pub entities: Vec<EntityRecord>,
    pub records: Vec<ExtractionRecord>,
    pub rounds_used: usize,
    pub strategy: NerStrategy,
    pub terminated_by: Termination,
    pub parse_failures: usize,
    /// Set when a provider error cut the loop short.
    pub incomplete: Option<String>,
}

impl NerHistory {
    fn absorb(&mut self, parsed: ParsedExtraction) {
        self.parse_failures += parsed.parse_failures;
        let mut seen_entities: BTreeSet<String> = self.entities.iter().map(|e| normalize_name(&e.name)).collect();
        for e in parsed.entities {
            if seen_entities.insert(normalize_name(&e.name)) {
                self.entities.push(e);
            }
        }
        let mut seen: BTreeSet<_> = self.records.iter().map(ExtractionRecord::triple_key).collect();
        for r in parsed.records {
            if seen.insert(r.triple_key()) {
                self.records.push(r);
            }
        }
        self.fill_types();
    }

    fn fill_types(&mut self) {
        let lookup = |name: &str| {
            let id = normalize_name(name);
            self.entities
                .iter()
                .find(|e| normalize_name(&e.name) == id)
                .map_or_else(|| UNKNOWN_TYPE.to_string(), |e| e.entity_type.clone())
        };
        let types: Vec<_> = self.records.iter().map(|r| (lookup(&r.subject), lookup(&r.object))).collect();
        for (r, t) in self.records.iter_mut().zip(types) {
            r.entity_types = t;
        }
    }

    pub fn rendered(&self) -> String {
        render_records(&self.entities, &self.records)
    }
}

/// Prompt construction for one chunk.
pub struct NerPrompts<'a> {
    config: &'a NerConfig,
    text: &'a str,
}

impl<'a> NerPrompts<'a> {
    pub fn new(config: &'a NerConfig, chunk: &'a Chunk) -> Self {
        Self { config, text: &chunk.text }
    }

    pub fn system(&self) -> String {
        let types = self.config.entity_types.join(", ");
        let mut examples: Vec<&str> = self.config.entity_types.iter().filter_map(|t| type_example(t)).collect();
        examples.push(
            r#"("relation"|Marie Curie|discovered|radium|Marie Curie discovered radium in 1898|scientist, discovery|4.5)"#,
        );
        let examples = examples.join("\n");
        prompts::render(
            prompts::NER_EXTRACT,
            &[("entity_types", &types), ("examples", &examples), ("completion_delimiter", COMPLETION_DELIMITER)],
        )
    }

    fn text_message(&self) -> Message {
        Message::user(prompts::render(prompts::NER_TEXT, &[("text", self.text)]))
    }

    pub fn init(&self) -> Vec<Message> {
        vec![Message::system(self.system()), self.text_message()]
    }

    fn with_history(&self, history: &NerHistory, ask: &str) -> Vec<Message> {
        vec![
            Message::system(self.system()),
            self.text_message(),
            Message::assistant(history.rendered()),
            Message::user(ask.trim()),
        ]
    }

    pub fn continuation(&self, history: &NerHistory) -> Vec<Message> {
        self.with_history(history, prompts::NER_CONTINUE)
    }

    pub fn judge(&self, history: &NerHistory) -> Vec<Message> {
        self.with_history(history, prompts::NER_JUDGE)
    }
}

fn request(config: &NerConfig, messages: Vec<Message>) -> ChatRequest {
    ChatRequest::new(messages).temperature(config.temperature).max_output_tokens(config.max_output_tokens)
}

/// First extraction pass over a chunk.
pub fn ner_init(gateway: &Gateway, chunk: &Chunk, config: &NerConfig) -> Result<ParsedExtraction, GatewayError> {
    let prompts = NerPrompts::new(config, chunk);
    let completion = gateway.chat(Purpose::NerInit, &request(config, prompts.init()), None)?;
    let parsed = parse_extraction(&completion, &chunk.chunk_id, &config.entity_types);
    if parsed.parse_failures > 0 {
        tracing::debug!(chunk = %chunk.chunk_id, failures = parsed.parse_failures, "unparseable NER lines");
    }
    Ok(parsed)
}

/// Iterative extraction. `rounds_used` counts continuation calls.
///
/// `trial` judges before each continuation; `base` continues first and
/// judges after. Errors from `ner_init` propagate; later provider errors
/// stop the loop and return the partial history marked incomplete.
pub fn loop_ner(gateway: &Gateway, chunk: &Chunk, config: &NerConfig) -> Result<NerHistory, GatewayError> {
    let prompts = NerPrompts::new(config, chunk);
    let mut history = NerHistory {
        chunk_id: chunk.chunk_id.clone(),
        entities: Vec::new(),
        records: Vec::new(),
        rounds_used: 0,
        strategy: config.strategy,
        terminated_by: Termination::MaxRounds,
        parse_failures: 0,
        incomplete: None,
    };
    history.absorb(ner_init(gateway, chunk, config)?);

    let judge = |h: &NerHistory| gateway.judge_messages(Purpose::NerJudge, prompts.judge(h), &[], config.temperature);
    let extend = |h: &mut NerHistory| -> Result<(), GatewayError> {
        let completion = gateway.chat(Purpose::NerContinue, &request(config, prompts.continuation(h)), None)?;
        h.absorb(parse_extraction(&completion, &chunk.chunk_id, &config.entity_types));
        h.rounds_used += 1;
        Ok(())
    };

    for _ in 0..config.max_rounds {
        let step = match config.strategy {
            NerStrategy::Trial => {
                judge(&history).and_then(|v| if v.is_yes() { extend(&mut history).map(|_| true) } else { Ok(false) })
            }
            NerStrategy::Base => extend(&mut history).and_then(|_| judge(&history)).map(|v| v.is_yes()),
        };
        match step {
            Ok(true) => {}
            Ok(false) => {
                history.terminated_by = Termination::JudgeNo;
                return Ok(history);
            }
            Err(e) => {
                history.terminated_by = Termination::Error;
                history.incomplete = Some(e.to_string());
                return Ok(history);
            }
        }
    }
    Ok(history)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeReport {
    pub nodes_created: usize,
    pub nodes_merged: usize,
    pub edges_created: usize,
    pub edges_merged: usize,
}

impl std::ops::AddAssign for MergeReport {
    fn add_assign(&mut self, rhs: Self) {
        self.nodes_created += rhs.nodes_created;
        self.nodes_merged += rhs.nodes_merged;
        self.edges_created += rhs.edges_created;
        self.edges_merged += rhs.edges_merged;
    }
}

/// Merges extraction output into `store`.
///
/// Entities merge by normalized name; descriptions are unioned by sentence,
/// keywords unioned, node weight is the max of contributing relation
/// weights. Edges merge by directed (subject, object) pair with weights
/// summed and capped at 100. Every record's chunk id joins the chunk refs of
/// what it touched. Counts are of distinct nodes and edges.
pub fn merge_into_graph(
    store: &mut GraphStore,
    entities: &[EntityRecord],
    records: &[ExtractionRecord],
) -> Result<MergeReport, StoreError> {
    let mut created_nodes = BTreeSet::new();
    let mut touched_nodes = BTreeSet::new();
    let mut created_edges = BTreeSet::new();
    let mut touched_edges = BTreeSet::new();

    let mut upsert_node = |store: &mut GraphStore, node: EntityNode| -> Result<(), StoreError> {
        let id = node.node_id.clone();
        if store.upsert_node(node)? == UpsertOutcome::Created {
            created_nodes.insert(id.clone());
        }
        touched_nodes.insert(id);
        Ok(())
    };

    for e in entities {
        let mut node = EntityNode::new(&e.name, &e.entity_type, &e.description);
        node.chunk_refs.insert(e.chunk_id.clone());
        upsert_node(store, node)?;
    }
    for r in records {
        if normalize_name(&r.subject) == normalize_name(&r.object) {
            store.metrics().self_loops_dropped.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            continue;
        }
        for (name, ty) in [(&r.subject, &r.entity_types.0), (&r.object, &r.entity_types.1)] {
            let mut node = EntityNode::new(name, ty, "");
            node.weight = r.weight;
            node.chunk_refs.insert(r.chunk_id.clone());
            upsert_node(store, node)?;
        }
        let keywords: Vec<String> = std::iter::once(r.relation.clone()).chain(r.keywords.iter().cloned()).collect();
        let mut edge = RelationEdge::new(&r.subject, &r.object, &r.description, &keywords, r.weight);
        edge.chunk_refs.insert(r.chunk_id.clone());
        let id = edge.edge_id();
        if store.upsert_edge(edge)? == UpsertOutcome::Created {
            created_edges.insert(id.clone());
        }
        touched_edges.insert(id);
    }
    Ok(MergeReport {
        nodes_created: created_nodes.len(),
        nodes_merged: touched_nodes.len() - created_nodes.len(),
        edges_created: created_edges.len(),
        edges_merged: touched_edges.len() - created_edges.len(),
    })
}
