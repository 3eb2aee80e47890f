//! Engine configuration.
//!
//! One TOML file with a section per stage. Every field has a default, so an
//! empty file is valid. Environment variables override file values:
//!
//! | variable | field |
//! |---|---|
//! | `KGRAG_PROVIDER` | `provider.kind` (`http` or `scripted`) |
//! | `KGRAG_ENDPOINT_URL` | `provider.endpoint_url` |
//! | `KGRAG_MODEL` | `provider.model_name` |
//! | `KGRAG_API_KEY` | `provider.api_key` |
//! | `KGRAG_MAX_CONTEXT_TOKENS` | `provider.max_context_tokens` |
//! | `KGRAG_FIXTURES` | `provider.fixtures` |
//! | `KGRAG_STORE` | `store.path` |
//! | `KGRAG_MODE` | `pipeline.mode` |
//! | `KGRAG_CHECK_MODE` | `pipeline.check_mode` |
//! | `KGRAG_REFUSAL_THRESHOLD` | `pipeline.refusal_threshold` |
//! | `KGRAG_DOMAIN` | `pipeline.domain` |
//! | `KGRAG_MATCH_MODE` | `retrieval.match_mode` |
//! | `KGRAG_NER_STRATEGY` | `ner.strategy` |
//! | `KGRAG_BIND` | `server.bind` |

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::builder::NerConfig;
use crate::gateway::{
    EmbeddingMode, Gateway, GatewayError, HashEmbedder, HttpProvider, Provider, ProviderConfig, RecordingProvider,
    ScriptedProvider,
};
use crate::ingestion::{DEFAULT_CHUNK_OVERLAP, DEFAULT_CHUNK_SIZE};
use crate::logic::LogicConfig;
use crate::retrieval::RetrievalConfig;
use crate::store::Granularity;
use crate::verify::{CheckMode, VerifyConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {name}: {message}")]
    Env { name: &'static str, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Http,
    Scripted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryMode {
    /// Logic form first, falling back to dual-level retrieval.
    #[default]
    Auto,
    Dual,
    Logic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderSection {
    pub kind: ProviderKind,
    /// Fixture file for the scripted provider.
    pub fixtures: Option<PathBuf>,
    /// Scripted embedding dimension.
    pub embedding_dimension: usize,
    pub embedding_mode: EmbeddingMode,
    /// When set, every chat call is appended here as a fixture line.
    pub record_to: Option<PathBuf>,
    #[serde(flatten)]
    pub http: ProviderConfig,
}

impl Default for ProviderSection {
    fn default() -> Self {
        let embedder = HashEmbedder::default();
        Self {
            kind: ProviderKind::default(),
            fixtures: None,
            embedding_dimension: embedder.dimension,
            embedding_mode: embedder.mode,
            record_to: None,
            http: ProviderConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub chunk_size: usize,
    pub chunk_overlap: usize,
    pub granularity: Granularity,
    /// Chunks extracted in parallel; 0 uses all cores.
    pub workers: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            chunk_size: DEFAULT_CHUNK_SIZE,
            chunk_overlap: DEFAULT_CHUNK_OVERLAP,
            granularity: Granularity::default(),
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub mode: QueryMode,
    pub check_mode: CheckMode,
    /// Intent scores below this are refused.
    pub refusal_threshold: f64,
    /// Description of what the knowledge base covers, shown to the intent model.
    pub domain: String,
    pub intent_enabled: bool,
    pub intent_temperature: f32,
    pub refusal_message: String,
    pub low_confidence_preamble: String,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            mode: QueryMode::Auto,
            check_mode: CheckMode::Argument,
            refusal_threshold: 0.5,
            domain: "general knowledge".into(),
            intent_enabled: true,
            intent_temperature: 0.0,
            refusal_message: "Sorry, this question is outside the scope of the knowledge base.".into(),
            low_confidence_preamble: "Low confidence: the retrieved context may not fully support this answer.".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StoreConfig {
    pub path: PathBuf,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { path: PathBuf::from("kgrag-store") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub bind: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8080".into() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub provider: ProviderSection,
    pub ingest: IngestConfig,
    pub ner: NerConfig,
    pub retrieval: RetrievalConfig,
    pub logic: LogicConfig,
    pub verify: VerifyConfig,
    pub pipeline: PipelineConfig,
    pub store: StoreConfig,
    pub server: ServerConfig,
}

/// Parses a config enum from its serialized name.
fn parse_enum<T: DeserializeOwned>(name: &'static str, value: &str) -> Result<T, ConfigError> {
    serde_json::from_value(serde_json::Value::String(value.trim().to_lowercase()))
        .map_err(|_| ConfigError::Env { name, message: format!("unknown value `{value}`") })
}

fn parse_number<T: std::str::FromStr>(name: &'static str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Env { name, message: e.to_string() })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { path: PathBuf::from("<inline>"), message: e.to_string() })
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut config: Self =
            toml::from_str(&text).map_err(|e| ConfigError::Parse { path: path.into(), message: e.to_string() })?;
        // Relative paths in the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.store.path);
        if let Some(f) = config.provider.fixtures.as_mut() {
            rebase(f);
        }
        if let Some(f) = config.provider.record_to.as_mut() {
            rebase(f);
        }
        Ok(config)
    }

    /// File (if any), then process environment, then validation.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut config = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        config.apply_env(|name| std::env::var(name).ok())?;
        config.validate()?;
        Ok(config)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var("KGRAG_PROVIDER") {
            self.provider.kind = parse_enum("KGRAG_PROVIDER", &v)?;
        }
        if let Some(v) = var("KGRAG_ENDPOINT_URL") {
            self.provider.http.endpoint_url = v;
        }
        if let Some(v) = var("KGRAG_MODEL") {
            self.provider.http.model_name = v;
        }
        if let Some(v) = var("KGRAG_API_KEY") {
            self.provider.http.api_key = Some(v);
        }
        if let Some(v) = var("KGRAG_MAX_CONTEXT_TOKENS") {
            self.provider.http.max_context_tokens = parse_number("KGRAG_MAX_CONTEXT_TOKENS", &v)?;
        }
        if let Some(v) = var("KGRAG_FIXTURES") {
            self.provider.fixtures = Some(v.into());
        }
        if let Some(v) = var("KGRAG_STORE") {
            self.store.path = v.into();
        }
        if let Some(v) = var("KGRAG_MODE") {
            self.pipeline.mode = parse_enum("KGRAG_MODE", &v)?;
        }
        if let Some(v) = var("KGRAG_CHECK_MODE") {
            self.pipeline.check_mode = parse_enum("KGRAG_CHECK_MODE", &v)?;
        }
        if let Some(v) = var("KGRAG_REFUSAL_THRESHOLD") {
            self.pipeline.refusal_threshold = parse_number("KGRAG_REFUSAL_THRESHOLD", &v)?;
        }
        if let Some(v) = var("KGRAG_DOMAIN") {
            self.pipeline.domain = v;
        }
        if let Some(v) = var("KGRAG_MATCH_MODE") {
            self.retrieval.match_mode = parse_enum("KGRAG_MATCH_MODE", &v)?;
        }
        if let Some(v) = var("KGRAG_NER_STRATEGY") {
            self.ner.strategy = parse_enum("KGRAG_NER_STRATEGY", &v)?;
        }
        if let Some(v) = var("KGRAG_BIND") {
            self.server.bind = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.provider.http.validate()?;
        if self.ingest.chunk_size <= self.ingest.chunk_overlap {
            return Err(ConfigError::Invalid(format!(
                "ingest.chunk_size ({}) must exceed ingest.chunk_overlap ({})",
                self.ingest.chunk_size, self.ingest.chunk_overlap
            )));
        }
        if !(0.0..=1.0).contains(&self.pipeline.refusal_threshold) {
            return Err(ConfigError::Invalid("pipeline.refusal_threshold must lie in [0, 1]".into()));
        }
        if self.logic.max_steps == 0 {
            return Err(ConfigError::Invalid("logic.max_steps must be positive".into()));
        }
        if self.provider.embedding_dimension == 0 {
            return Err(ConfigError::Invalid("provider.embedding_dimension must be positive".into()));
        }
        Ok(())
    }

    /// Builds the gateway for the configured provider.
    pub fn gateway(&self) -> Result<Gateway, ConfigError> {
        let provider: Arc<dyn Provider> = match self.provider.kind {
            ProviderKind::Http => Arc::new(HttpProvider::new(self.provider.http.clone())?),
            ProviderKind::Scripted => {
                let scripted = match &self.provider.fixtures {
                    Some(path) => ScriptedProvider::from_file(path)?,
                    None => ScriptedProvider::default(),
                };
                let embedder =
                    HashEmbedder { dimension: self.provider.embedding_dimension, mode: self.provider.embedding_mode };
                Arc::new(scripted.with_embedder(embedder))
            }
        };
        let provider: Arc<dyn Provider> = match &self.provider.record_to {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|source| ConfigError::Read { path: path.clone(), source })?;
                Arc::new(RecordingProvider::new(provider, Box::new(file)))
            }
            None => provider,
        };
        Ok(Gateway::new(provider, self.provider.http.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builder::NerStrategy;
    use crate::retrieval::MatchMode;
    use std::collections::HashMap;

    #[test]
    fn empty_file_gives_defaults() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.ingest.chunk_size, 768);
        assert_eq!(c.ingest.chunk_overlap, 32);
        assert_eq!(c.retrieval.node_edge_budget, 8192);
        assert_eq!(c.retrieval.chunk_budget, 12288);
        assert_eq!(c.retrieval.representation_budget, 28672);
        assert_eq!(c.pipeline.refusal_threshold, 0.5);
        assert_eq!(c.pipeline.check_mode, CheckMode::Argument);
        c.validate().unwrap();
    }

    #[test]
    fn sections_parse() {
        let c = Config::from_toml(
            r#"
            [provider]
            kind = "scripted"
            endpoint_url = "http://example.test/v1"
            max_context_tokens = 4096
            embedding_mode = "char_trigram"

            [provider.extra_params.rope_scaling]
            type = "yarn"
            factor = 4.0

            [ner]
            strategy = "trial"
            max_rounds = 3

            [retrieval]
            match_mode = "exact"

            [pipeline]
            mode = "dual"
            check_mode = "result"
            "#,
        )
        .unwrap();
        assert_eq!(c.provider.kind, ProviderKind::Scripted);
        assert_eq!(c.provider.http.max_context_tokens, 4096);
        assert_eq!(c.provider.embedding_mode, EmbeddingMode::CharTrigram);
        assert!(c.provider.http.extra_params.contains_key("rope_scaling"));
        assert_eq!(c.ner.strategy, NerStrategy::Trial);
        assert_eq!(c.ner.max_rounds, 3);
        assert_eq!(c.retrieval.match_mode, MatchMode::Exact);
        assert_eq!(c.retrieval.k_low, 20);
        assert_eq!(c.pipeline.mode, QueryMode::Dual);
        assert_eq!(c.pipeline.check_mode, CheckMode::Result);
        assert!(Config::from_toml("[ner]\nstrategy = \"greedy\"").is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let mut c = Config::from_toml("[pipeline]\nmode = \"dual\"").unwrap();
        let env: HashMap<&str, &str> = HashMap::from([
            ("KGRAG_MODE", "Logic"),
            ("KGRAG_MATCH_MODE", "exact"),
            ("KGRAG_REFUSAL_THRESHOLD", "0.25"),
            ("KGRAG_STORE", "/tmp/s"),
            ("KGRAG_PROVIDER", "scripted"),
        ]);
        c.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(c.pipeline.mode, QueryMode::Logic);
        assert_eq!(c.retrieval.match_mode, MatchMode::Exact);
        assert_eq!(c.pipeline.refusal_threshold, 0.25);
        assert_eq!(c.store.path, PathBuf::from("/tmp/s"));
        let bad = c.apply_env(|k| (k == "KGRAG_CHECK_MODE").then(|| "both".to_string()));
        assert!(matches!(bad, Err(ConfigError::Env { name: "KGRAG_CHECK_MODE", .. })));
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut c = Config::default();
        c.ingest.chunk_overlap = 768;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.pipeline.refusal_threshold = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kgrag.toml");
        std::fs::write(&path, "[store]\npath = \"store\"\n[provider]\nkind = \"scripted\"\n").unwrap();
        let c = Config::from_file(&path).unwrap();
        assert_eq!(c.store.path, dir.path().join("store"));
        let gw = c.gateway().unwrap();
        assert_eq!(gw.embed(&["x".into()]).unwrap()[0].len(), 64);
    }
}
