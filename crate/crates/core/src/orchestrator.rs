//! Query pipeline and ingestion driver.
//!
//! [`Engine::answer`] runs intent analysis (with refusal), then logic-form
//! retrieval checked by the verifier, falling back to dual-level retrieval.
//! When neither path verifies, the dual-level answer is still generated but
//! carries a low-confidence preamble. Progress is reported as a stream of
//! [`PipelineEvent`]s and summarized in a [`PipelineTrace`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::builder::{loop_ner, merge_into_graph, MergeReport, NerHistory};
use crate::config::{Config, ConfigError, PipelineConfig, QueryMode};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Message, Purpose};
use crate::ingestion::{expand_paths, load_documents, split, Chunk, Document, IngestError, LoadWarning};
use crate::logic::{self, History, LogicError};
use crate::prompts;
use crate::retrieval::{self, ContextBundle, RetrievalError};
use crate::store::{GraphStore, Manifest, SharedStore, StoreError, StoreStats};
use crate::verify::{self, CheckMode, Evidence, Support};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("query must not be empty")]
    EmptyQuery,
    #[error("store is not loaded or has no nodes")]
    StoreNotLoaded,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Intent,
    LogicForm,
    DualLevel,
    Verify,
    Generate,
}

impl StageName {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Intent => "intent",
            Self::LogicForm => "logic_form",
            Self::DualLevel => "dual_level",
            Self::Verify => "verify",
            Self::Generate => "generate",
        }
    }
}

/// `Started` appears only in events; trace records carry a final status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Started,
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalPath {
    Refused,
    LogicForm,
    DualLevel,
    DualLevelUnverified,
    /// Forced logic mode whose plan failed or did not verify.
    LogicFormUnverified,
}

impl FinalPath {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Refused => "refused",
            Self::LogicForm => "logic_form",
            Self::DualLevel => "dual_level",
            Self::DualLevelUnverified => "dual_level_unverified",
            Self::LogicFormUnverified => "logic_form_unverified",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: StageName,
    pub status: StageStatus,
    pub duration_ms: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageUsage {
    pub calls: usize,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineTrace {
    pub query_id: String,
    pub mode: QueryMode,
    pub stages: Vec<StageRecord>,
    pub final_path: FinalPath,
    pub token_usage: BTreeMap<StageName, StageUsage>,
    pub intent: Option<IntentDecision>,
}

impl PipelineTrace {
    /// Status of the last record for `name`, if the stage appears.
    pub fn status(&self, name: StageName) -> Option<StageStatus> {
        self.stages.iter().rev().find(|s| s.name == name).map(|s| s.status)
    }

    pub fn total_calls(&self) -> usize {
        self.token_usage.values().map(|u| u.calls).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum PipelineEvent {
    Stage { name: StageName, status: StageStatus, detail: String },
    Token { text: String },
    Verdict { stage: StageName, mode: CheckMode, verdict: Support },
    Done { final_path: FinalPath, answer: String },
    Error { message: String },
}

impl PipelineEvent {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Stage { .. } => "stage",
            Self::Token { .. } => "token",
            Self::Verdict { .. } => "verdict",
            Self::Done { .. } => "done",
            Self::Error { .. } => "error",
        }
    }

    /// The event body without its type tag.
    pub fn payload(&self) -> serde_json::Value {
        let mut value = serde_json::to_value(self).expect("events serialize");
        if let Some(map) = value.as_object_mut() {
            map.remove("type");
        }
        value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDecision {
    pub in_domain: bool,
    pub score: f64,
    pub slots: BTreeMap<String, String>,
    /// The completion could not be used; the query was let through.
    pub fail_open: bool,
}

impl IntentDecision {
    fn open() -> Self {
        Self { in_domain: true, score: 1.0, slots: BTreeMap::new(), fail_open: true }
    }
}

/// Parses `{"score": x, "slots": {...}}` out of an intent completion.
/// Anything unusable lets the query through.
pub fn parse_intent(completion: &str, threshold: f64) -> IntentDecision {
    let (Some(start), Some(end)) = (completion.find('{'), completion.rfind('}')) else {
        return IntentDecision::open();
    };
    if end < start {
        return IntentDecision::open();
    }
    let Ok(value) = serde_json::from_str::<serde_json::Value>(&completion[start..=end]) else {
        return IntentDecision::open();
    };
    let Some(score) = value.get("score").and_then(|s| s.as_f64().or_else(|| s.as_str()?.trim().parse().ok())) else {
        return IntentDecision::open();
    };
    if !score.is_finite() {
        return IntentDecision::open();
    }
    let score = score.clamp(0.0, 1.0);
    let slots = value
        .get("slots")
        .and_then(|s| s.as_object())
        .map(|m| m.iter().map(|(k, v)| (k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string))).collect())
        .unwrap_or_default();
    IntentDecision { in_domain: score >= threshold, score, slots, fail_open: false }
}

pub fn intent_messages(query: &str, domain: &str) -> Vec<Message> {
    vec![Message::system(prompts::render(prompts::INTENT, &[("domain", domain)])), Message::user(query)]
}

/// One model call. Provider or parse failures let the query through.
pub fn analyze_intent(gateway: &Gateway, query: &str, config: &PipelineConfig) -> IntentDecision {
    let request = ChatRequest::new(intent_messages(query, &config.domain))
        .temperature(config.intent_temperature)
        .max_output_tokens(256);
    match gateway.chat(Purpose::Intent, &request, None) {
        Ok(completion) => parse_intent(&completion, config.refusal_threshold),
        Err(e) => {
            tracing::warn!(error = %e, "intent analysis failed; letting the query through");
            IntentDecision::open()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerOutcome {
    pub answer: String,
    pub trace: PipelineTrace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedChunk {
    pub chunk_id: String,
    pub source_path: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks_total: usize,
    /// Chunks already present in the store.
    pub chunks_skipped: usize,
    pub chunks_ingested: usize,
    pub failed: Vec<FailedChunk>,
    /// Chunks whose extraction loop stopped early on a provider error.
    pub incomplete: Vec<String>,
    pub warnings: Vec<LoadWarning>,
    pub merge: MergeReport,
    pub embeddings_refreshed: usize,
    pub provider_calls: usize,
    pub stats: StoreStats,
}

static QUERY_SEQ: AtomicU64 = AtomicU64::new(0);

fn query_id(query: &str) -> String {
    let digest = hex::encode(Sha256::digest(query.as_bytes()));
    format!("q{:06}-{}", QUERY_SEQ.fetch_add(1, Ordering::Relaxed), &digest[..8])
}

/// A configured engine over one shared store.
pub struct Engine {
    config: Config,
    gateway: Gateway,
    store: SharedStore,
    store_path: Option<PathBuf>,
    ingest_lock: Mutex<()>,
}

impl Engine {
    pub fn new(config: Config, gateway: Gateway, store: GraphStore) -> Self {
        Self { config, gateway, store: SharedStore::new(store), store_path: None, ingest_lock: Mutex::new(()) }
    }

    /// Builds the gateway from `config` and loads the store at
    /// `config.store.path`, starting empty if nothing is there yet.
    pub fn open(config: Config) -> Result<Self, PipelineError> {
        let gateway = config.gateway()?;
        let path = config.store.path.clone();
        let store = if GraphStore::exists(&path) {
            GraphStore::load(&path)?
        } else {
            GraphStore::new(config.ingest.granularity)
        };
        Ok(Self::new(config, gateway, store).with_store_path(path))
    }

    /// Ingestion dumps the store here after each change.
    pub fn with_store_path(mut self, path: impl Into<PathBuf>) -> Self {
        self.store_path = Some(path.into());
        self
    }

    pub fn config(&self) -> &Config {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &SharedStore {
        &self.store
    }

    pub fn snapshot(&self) -> Arc<GraphStore> {
        self.store.snapshot()
    }

    pub fn store_path(&self) -> Option<&Path> {
        self.store_path.as_deref()
    }

    pub fn persist(&self) -> Result<Option<Manifest>, PipelineError> {
        match &self.store_path {
            Some(path) => Ok(Some(self.snapshot().dump(path)?)),
            None => Ok(None),
        }
    }

    /// Answers `query`, pushing events into `sink` as the pipeline runs.
    /// Failures are also reported as a final `error` event.
    pub fn answer(
        &self,
        query: &str,
        mode: QueryMode,
        sink: &mut dyn FnMut(PipelineEvent),
    ) -> Result<AnswerOutcome, PipelineError> {
        let result = self.answer_inner(query, mode, sink);
        if let Err(e) = &result {
            sink(PipelineEvent::Error { message: e.to_string() });
        }
        result
    }

    fn answer_inner(
        &self,
        query: &str,
        mode: QueryMode,
        sink: &mut dyn FnMut(PipelineEvent),
    ) -> Result<AnswerOutcome, PipelineError> {
        let query = query.trim();
        if query.is_empty() {
            return Err(PipelineError::EmptyQuery);
        }
        let store = self.snapshot();
        if store.stats().nodes == 0 {
            return Err(PipelineError::StoreNotLoaded);
        }
        let mut run = Run {
            engine: self,
            gateway: self.gateway.scoped(),
            store: &store,
            query,
            sink,
            answer: String::new(),
            trace: PipelineTrace {
                query_id: query_id(query),
                mode,
                stages: Vec::new(),
                final_path: FinalPath::DualLevelUnverified,
                token_usage: BTreeMap::new(),
                intent: None,
            },
        };
        let final_path = run.pipeline(mode)?;
        run.trace.final_path = final_path;
        (run.sink)(PipelineEvent::Done { final_path, answer: run.answer.clone() });
        Ok(AnswerOutcome { answer: run.answer, trace: run.trace })
    }

    /// Loads, splits and extracts `paths` (files or directories), merging
    /// into the store.
    pub fn ingest(&self, paths: &[PathBuf]) -> Result<IngestReport, PipelineError> {
        let loaded = load_documents(&expand_paths(paths)?)?;
        let mut report = self.ingest_documents(&loaded.documents)?;
        report.warnings = loaded.warnings;
        Ok(report)
    }

    /// Chunks already in the store are skipped, so repeated calls only
    /// process new text. Chunks whose extraction fails are reported and left
    /// out; everything else is committed.
    pub fn ingest_documents(&self, documents: &[Document]) -> Result<IngestReport, PipelineError> {
        let _guard = self.ingest_lock.lock();
        let gateway = self.gateway.scoped();
        let config = &self.config;
        let existing = self.snapshot();

        let mut chunks: Vec<(Chunk, &str)> = Vec::new();
        let mut report = IngestReport { documents: documents.len(), ..Default::default() };
        for doc in documents {
            for chunk in split(doc, config.ingest.chunk_size, config.ingest.chunk_overlap)? {
                report.chunks_total += 1;
                if existing.has_chunk(&chunk.chunk_id) || chunks.iter().any(|(c, _)| c.chunk_id == chunk.chunk_id) {
                    report.chunks_skipped += 1;
                } else {
                    chunks.push((chunk, doc.source_path.as_str()));
                }
            }
        }
        drop(existing);
        if chunks.is_empty() {
            report.stats = self.snapshot().stats();
            return Ok(report);
        }

        let extract = || -> Vec<Result<NerHistory, GatewayError>> {
            chunks.par_iter().map(|(chunk, _)| loop_ner(&gateway, chunk, &config.ner)).collect()
        };
        let results = match config.ingest.workers {
            0 => extract(),
            n => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| PipelineError::Config(ConfigError::Invalid(e.to_string())))?
                .install(extract),
        };

        let mut committed = Vec::new();
        for ((chunk, source), result) in chunks.into_iter().zip(results) {
            match result {
                Ok(history) => {
                    if history.incomplete.is_some() {
                        report.incomplete.push(chunk.chunk_id.clone());
                    }
                    committed.push((chunk, history));
                }
                Err(e) => report.failed.push(FailedChunk {
                    chunk_id: chunk.chunk_id.clone(),
                    source_path: source.to_string(),
                    error: e.to_string(),
                }),
            }
        }
        report.chunks_ingested = committed.len();

        if !committed.is_empty() {
            let (merge, refreshed) = self.store.write(|store| -> Result<_, StoreError> {
                let mut merge = MergeReport::default();
                for (chunk, history) in committed {
                    if store.has_chunk(&chunk.chunk_id) {
                        continue;
                    }
                    store.insert_chunk(chunk);
                    merge += merge_into_graph(store, &history.entities, &history.records)?;
                }
                let refreshed = store.refresh_embeddings(&gateway)?;
                Ok((merge, refreshed))
            })?;
            report.merge = merge;
            report.embeddings_refreshed = refreshed;
            self.persist()?;
        }
        report.provider_calls = gateway.calls().len();
        report.stats = self.snapshot().stats();
        tracing::info!(
            ingested = report.chunks_ingested,
            skipped = report.chunks_skipped,
            failed = report.failed.len(),
            "ingest finished"
        );
        Ok(report)
    }
}

struct StageTimer {
    name: StageName,
    started: Instant,
    calls_before: usize,
}

/// Outcome of checking one piece of evidence.
struct Checked {
    supported: bool,
    /// Generated text, when the check produced one.
    generation: Option<String>,
    /// Fragments held back until the verdict was known.
    held: Vec<String>,
}

struct Run<'a> {
    engine: &'a Engine,
    gateway: Gateway,
    store: &'a GraphStore,
    query: &'a str,
    sink: &'a mut dyn FnMut(PipelineEvent),
    answer: String,
    trace: PipelineTrace,
}

impl Run<'_> {
    fn pipeline_config(&self) -> &PipelineConfig {
        &self.engine.config.pipeline
    }

    fn start(&mut self, name: StageName) -> StageTimer {
        (self.sink)(PipelineEvent::Stage { name, status: StageStatus::Started, detail: String::new() });
        StageTimer { name, started: Instant::now(), calls_before: self.gateway.calls().len() }
    }

    fn finish(&mut self, timer: StageTimer, status: StageStatus, detail: impl Into<String>) {
        let detail = detail.into();
        let calls = self.gateway.calls();
        let usage = self.trace.token_usage.entry(timer.name).or_default();
        for c in &calls[timer.calls_before..] {
            usage.calls += 1;
            usage.prompt_tokens += c.prompt_tokens;
            usage.completion_tokens += c.completion_tokens;
        }
        self.trace.stages.push(StageRecord {
            name: timer.name,
            status,
            duration_ms: timer.started.elapsed().as_secs_f64() * 1000.0,
            detail: detail.clone(),
        });
        (self.sink)(PipelineEvent::Stage { name: timer.name, status, detail });
    }

    fn skip(&mut self, name: StageName, detail: &str) {
        self.trace.stages.push(StageRecord {
            name,
            status: StageStatus::Skipped,
            duration_ms: 0.0,
            detail: detail.into(),
        });
        (self.sink)(PipelineEvent::Stage { name, status: StageStatus::Skipped, detail: detail.into() });
    }

    fn token(&mut self, text: &str) {
        if text.is_empty() {
            return;
        }
        self.answer.push_str(text);
        (self.sink)(PipelineEvent::Token { text: text.to_string() });
    }

    fn pipeline(&mut self, mode: QueryMode) -> Result<FinalPath, PipelineError> {
        if self.pipeline_config().intent_enabled {
            let timer = self.start(StageName::Intent);
            let decision = analyze_intent(&self.gateway, self.query, self.pipeline_config());
            let detail = format!(
                "score {:.2}{}{}",
                decision.score,
                if decision.fail_open { " (unparsed, allowed)" } else { "" },
                if decision.in_domain { "" } else { ", refused" }
            );
            tracing::debug!(slots = ?decision.slots, "intent slots");
            let refused = !decision.in_domain;
            self.trace.intent = Some(decision);
            self.finish(timer, StageStatus::Ok, detail);
            if refused {
                for stage in [StageName::LogicForm, StageName::DualLevel, StageName::Verify, StageName::Generate] {
                    self.skip(stage, "refused");
                }
                let message = self.pipeline_config().refusal_message.clone();
                self.token(&message);
                return Ok(FinalPath::Refused);
            }
        } else {
            self.skip(StageName::Intent, "disabled");
        }

        if mode == QueryMode::Dual {
            self.skip(StageName::LogicForm, "mode dual");
        } else {
            let (history, executed) = self.logic_form();
            if executed {
                let checked = self.check(StageName::LogicForm, Evidence::History(&history))?;
                if checked.supported {
                    self.skip(StageName::DualLevel, "logic form verified");
                    return Ok(FinalPath::LogicForm);
                }
                if mode == QueryMode::Logic {
                    self.skip(StageName::DualLevel, "mode logic");
                    self.unverified(Evidence::History(&history), checked)?;
                    return Ok(FinalPath::LogicFormUnverified);
                }
            } else if mode == QueryMode::Logic {
                self.skip(StageName::DualLevel, "mode logic");
                let none = Checked { supported: false, generation: None, held: Vec::new() };
                self.unverified(Evidence::History(&history), none)?;
                return Ok(FinalPath::LogicFormUnverified);
            }
        }

        let bundle = self.dual_level()?;
        let checked = self.check(StageName::DualLevel, Evidence::Bundle(&bundle))?;
        if checked.supported {
            return Ok(FinalPath::DualLevel);
        }
        self.unverified(Evidence::Bundle(&bundle), checked)?;
        Ok(FinalPath::DualLevelUnverified)
    }

    /// Plans and executes; returns the (possibly partial) history and
    /// whether every step ran.
    fn logic_form(&mut self) -> (History, bool) {
        let timer = self.start(StageName::LogicForm);
        let config = &self.engine.config;
        let outcome = logic::run(&self.gateway, self.store, self.query, &config.retrieval, &config.logic);
        match outcome {
            Ok(o) => {
                let detail = format!("{} steps, {} history tokens", o.plan.steps.len(), o.history.total_tokens);
                self.finish(timer, StageStatus::Ok, detail);
                (o.history, true)
            }
            Err(LogicError::StepExecutionFailed { step, reason, partial }) => {
                self.finish(timer, StageStatus::Failed, format!("step {step} failed: {reason}"));
                (partial, false)
            }
            Err(e) => {
                self.finish(timer, StageStatus::Failed, e.to_string());
                (History::default(), false)
            }
        }
    }

    fn dual_level(&mut self) -> Result<ContextBundle, PipelineError> {
        let timer = self.start(StageName::DualLevel);
        let config = &self.engine.config.retrieval;
        let result = retrieval::decompose_or_fallback(&self.gateway, self.query, config)
            .and_then(|rq| retrieval::retrieve(&rq, self.store, config).map(|b| (rq, b)));
        match result {
            Ok((rq, bundle)) => {
                let detail = format!(
                    "{}{} low / {} high keywords; {} nodes, {} edges, {} chunks, {} tokens",
                    if rq.fallback { "keyword fallback; " } else { "" },
                    rq.low_level_keywords.len(),
                    rq.high_level_keywords.len(),
                    bundle.node_ids.len(),
                    bundle.edge_ids.len(),
                    bundle.chunk_ids.len(),
                    bundle.token_count()
                );
                self.finish(timer, StageStatus::Ok, detail);
                Ok(bundle)
            }
            Err(e) => {
                self.finish(timer, StageStatus::Failed, e.to_string());
                Err(e.into())
            }
        }
    }

    fn verdict(&mut self, stage: StageName, mode: CheckMode, supported: bool) {
        let verdict = if supported { Support::Supported } else { Support::Unsupported };
        (self.sink)(PipelineEvent::Verdict { stage, mode, verdict });
    }

    /// Generates from `evidence`. Fragments stream straight to the sink
    /// unless `hold` is set, in which case they are returned.
    fn generate(&mut self, evidence: Evidence<'_>, hold: bool) -> Result<(String, Vec<String>), PipelineError> {
        let timer = self.start(StageName::Generate);
        let config = &self.engine.config.verify;
        let mut fragments = Vec::new();
        let result = {
            let sink = &mut *self.sink;
            let answer = &mut self.answer;
            let mut forward = |f: &str| {
                if hold {
                    fragments.push(f.to_string());
                } else {
                    answer.push_str(f);
                    sink(PipelineEvent::Token { text: f.to_string() });
                }
            };
            verify::generate_answer(&self.gateway, self.query, evidence, config, Some(&mut forward))
        };
        match result {
            Ok(text) => {
                self.finish(timer, StageStatus::Ok, format!("{} fragments", fragments.len().max(1)));
                Ok((text, fragments))
            }
            Err(e) => {
                self.finish(timer, StageStatus::Failed, e.to_string());
                Err(e.into())
            }
        }
    }

    /// Verifies `evidence` with the configured check. On a supported
    /// verdict the answer has been streamed when this returns.
    fn check(&mut self, stage: StageName, evidence: Evidence<'_>) -> Result<Checked, PipelineError> {
        let mode = self.pipeline_config().check_mode;
        let config = self.engine.config.verify.clone();
        let empty = match evidence {
            Evidence::Bundle(b) => b.is_empty(),
            Evidence::History(h) => h.entries.is_empty(),
        };
        if empty {
            let timer = self.start(StageName::Verify);
            self.finish(timer, StageStatus::Failed, format!("{}: empty context", stage.as_str()));
            self.verdict(stage, mode, false);
            return Ok(Checked { supported: false, generation: None, held: Vec::new() });
        }
        match mode {
            CheckMode::Argument => {
                let timer = self.start(StageName::Verify);
                let supported = match verify::judge_argument(&self.gateway, self.query, evidence, &config) {
                    Ok(v) => {
                        let supported = v.is_yes();
                        let status = if supported { StageStatus::Ok } else { StageStatus::Failed };
                        self.finish(
                            timer,
                            status,
                            format!("{}: argument judge said {:?}", stage.as_str(), v.raw_text.trim()),
                        );
                        supported
                    }
                    Err(e) => {
                        self.finish(timer, StageStatus::Failed, format!("{}: {e}", stage.as_str()));
                        false
                    }
                };
                self.verdict(stage, mode, supported);
                let generation = match supported {
                    true => Some(self.generate(evidence, false)?.0),
                    false => None,
                };
                Ok(Checked { supported, generation, held: Vec::new() })
            }
            CheckMode::Result => {
                let (text, held) = self.generate(evidence, true)?;
                let timer = self.start(StageName::Verify);
                let supported = match verify::judge_result(&self.gateway, self.query, evidence, &text, &config) {
                    Ok(v) => {
                        let supported = v.is_yes();
                        let status = if supported { StageStatus::Ok } else { StageStatus::Failed };
                        self.finish(
                            timer,
                            status,
                            format!("{}: result judge said {:?}", stage.as_str(), v.raw_text.trim()),
                        );
                        supported
                    }
                    Err(e) => {
                        self.finish(timer, StageStatus::Failed, format!("{}: {e}", stage.as_str()));
                        false
                    }
                };
                self.verdict(stage, mode, supported);
                if supported {
                    self.release(&held, &text);
                }
                Ok(Checked { supported, generation: Some(text), held })
            }
        }
    }

    /// Streams fragments that were held back, or the whole text when the
    /// provider produced none.
    fn release(&mut self, held: &[String], text: &str) {
        if held.is_empty() {
            self.token(text);
        } else {
            for f in held {
                self.token(f);
            }
        }
    }

    /// Answer with the low-confidence preamble, reusing a generation the
    /// check already produced.
    fn unverified(&mut self, evidence: Evidence<'_>, checked: Checked) -> Result<(), PipelineError> {
        let preamble = format!("{}\n\n", self.pipeline_config().low_confidence_preamble);
        self.token(&preamble);
        match checked.generation {
            Some(text) => self.release(&checked.held, &text),
            None => {
                self.generate(evidence, false)?;
            }
        }
        Ok(())
    }
}
