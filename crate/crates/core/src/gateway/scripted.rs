//! Deterministic scripted provider and seeded-hash embeddings.
//!
//! Fixture files are JSON lines. Each line is one [`FixtureEntry`]: either
//! keyed by `digest` (lowercase hex SHA-256 of the compact JSON array of
//! `{"role","content"}` messages) or by a `match` rule of substrings. Digest
//! entries win; rules are tried in file order. Blank lines and lines starting
//! with `#` are ignored.
//!
//! Embeddings never need fixtures: every text maps to a seeded-hash vector.
//! The seed is the first eight bytes (little endian) of SHA-256(text); a
//! SplitMix64 counter stream produces uniforms, Box-Muller turns each pair
//! into two gaussians, and the `d` gaussians are L2-normalized.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, GatewayError, Message, Provider, Result, Role};

/// Lowercase hex SHA-256 over the compact JSON serialization of `messages`.
pub fn request_digest(messages: &[Message]) -> String {
    let json = serde_json::to_string(messages).expect("messages serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureMatch {
    /// Substring of the first system message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Substring of the last user message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<String>,
    /// Substring of any message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub any: Option<String>,
    /// Substring that must appear in no message.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absent: Option<String>,
}

impl FixtureMatch {
    fn matches(&self, messages: &[Message]) -> bool {
        let system = messages.iter().find(|m| m.role == Role::System).map(|m| m.content.as_str());
        let user = messages.iter().rev().find(|m| m.role == Role::User).map(|m| m.content.as_str());
        let check = |needle: &Option<String>, hay: Option<&str>| match needle {
            None => true,
            Some(n) => hay.is_some_and(|h| h.contains(n.as_str())),
        };
        check(&self.system, system)
            && check(&self.user, user)
            && self.any.as_ref().is_none_or(|n| messages.iter().any(|m| m.content.contains(n.as_str())))
            && self.absent.as_ref().is_none_or(|n| !messages.iter().any(|m| m.content.contains(n.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub digest: Option<String>,
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub rule: Option<FixtureMatch>,
    pub completion: String,
    /// Streamed fragments; must concatenate to `completion`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fragments: Option<Vec<String>>,
}

impl FixtureEntry {
    pub fn digest(digest: impl Into<String>, completion: impl Into<String>) -> Self {
        Self { digest: Some(digest.into()), rule: None, completion: completion.into(), fragments: None }
    }

    pub fn rule(rule: FixtureMatch, completion: impl Into<String>) -> Self {
        Self { digest: None, rule: Some(rule), completion: completion.into(), fragments: None }
    }

    pub fn when_user(needle: impl Into<String>, completion: impl Into<String>) -> Self {
        Self::rule(FixtureMatch { user: Some(needle.into()), ..Default::default() }, completion)
    }

    pub fn when_system(needle: impl Into<String>, completion: impl Into<String>) -> Self {
        Self::rule(FixtureMatch { system: Some(needle.into()), ..Default::default() }, completion)
    }

    pub fn with_fragments(mut self, fragments: Vec<String>) -> Self {
        self.fragments = Some(fragments);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One seeded-hash vector per whole text.
    WholeText,
    /// Sum of seeded-hash vectors of the character trigrams of the text,
    /// lowercased with whitespace and punctuation removed. Near spellings
    /// land near each other.
    CharTrigram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dimension: usize,
    pub mode: EmbeddingMode,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dimension: 64, mode: EmbeddingMode::WholeText }
    }
}

fn splitmix64(state: u64) -> u64 {
    let mut z = state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn gaussians(text: &str, dimension: usize) -> Vec<f64> {
    let digest = Sha256::digest(text.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let uniform = |counter: u64| {
        let bits = splitmix64(seed.wrapping_add(counter.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        // (0, 1]
        ((bits >> 11) + 1) as f64 / (1u64 << 53) as f64
    };
    let mut out = Vec::with_capacity(dimension + 1);
    let mut counter = 0u64;
    while out.len() < dimension {
        let u1 = uniform(counter);
        let u2 = uniform(counter + 1);
        counter += 2;
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        out.push(radius * angle.cos());
        out.push(radius * angle.sin());
    }
    out.truncate(dimension);
    out
}

fn to_unit(v: Vec<f64>) -> Vec<f32> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / norm) as f32).collect()
}

/// The documented whole-text seeded-hash unit vector.
pub fn seeded_hash_vector(text: &str, dimension: usize) -> Vec<f32> {
    to_unit(gaussians(text, dimension))
}

impl HashEmbedder {
    pub fn embed(&self, text: &str) -> Vec<f32> {
        match self.mode {
            EmbeddingMode::WholeText => seeded_hash_vector(text, self.dimension),
            EmbeddingMode::CharTrigram => {
                let folded: Vec<char> = text.to_lowercase().chars().filter(|c| c.is_alphanumeric()).collect();
                if folded.is_empty() {
                    return seeded_hash_vector(text, self.dimension);
                }
                let mut padded = vec!['^'];
                padded.extend(folded);
                padded.push('$');
                let mut acc = vec![0.0f64; self.dimension];
                for window in padded.windows(3.min(padded.len())) {
                    let gram: String = window.iter().collect();
                    for (a, g) in acc.iter_mut().zip(gaussians(&gram, self.dimension)) {
                        *a += g;
                    }
                }
                to_unit(acc)
            }
        }
    }
}

/// Replays recorded completions; immutable once loaded.
#[derive(Debug, Clone, Default)]
pub struct ScriptedProvider {
    id: String,
    by_digest: HashMap<String, FixtureEntry>,
    rules: Vec<FixtureEntry>,
    embedder: HashEmbedder,
}

impl ScriptedProvider {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        let mut provider = Self { id: "scripted".into(), ..Default::default() };
        for entry in entries {
            match &entry.digest {
                Some(d) => {
                    provider.by_digest.entry(d.clone()).or_insert(entry);
                }
                None => provider.rules.push(entry),
            }
        }
        provider
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let entry: FixtureEntry = serde_json::from_str(line)
                .map_err(|e| GatewayError::Config(format!("fixture line {}: {e}", lineno + 1)))?;
            if entry.digest.is_none() && entry.rule.is_none() {
                return Err(GatewayError::Config(format!(
                    "fixture line {}: needs a digest or a match rule",
                    lineno + 1
                )));
            }
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        Self::from_jsonl(&text)
    }

    pub fn with_embedder(mut self, embedder: HashEmbedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn embedder(&self) -> HashEmbedder {
        self.embedder
    }

    fn lookup(&self, messages: &[Message]) -> Option<&FixtureEntry> {
        self.by_digest
            .get(&request_digest(messages))
            .or_else(|| self.rules.iter().find(|e| e.rule.as_ref().is_some_and(|r| r.matches(messages))))
    }
}

impl Provider for ScriptedProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest, sink: &mut dyn FnMut(&str)) -> Result<String> {
        let entry = self
            .lookup(&request.messages)
            .ok_or_else(|| GatewayError::FixtureMiss { digest: request_digest(&request.messages) })?;
        if request.stream {
            match &entry.fragments {
                Some(fragments) => fragments.iter().for_each(|f| sink(f)),
                None => sink(&entry.completion),
            }
        }
        Ok(entry.completion.clone())
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(texts.iter().map(|t| self.embedder.embed(t)).collect())
    }
}

/// Wraps a live provider and appends a digest fixture line per completion,
/// producing a file [`ScriptedProvider::from_file`] can replay.
pub struct RecordingProvider {
    inner: Arc<dyn Provider>,
    out: Mutex<Box<dyn Write + Send>>,
}

impl RecordingProvider {
    pub fn new(inner: Arc<dyn Provider>, out: Box<dyn Write + Send>) -> Self {
        Self { inner, out: Mutex::new(out) }
    }
}

impl Provider for RecordingProvider {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &ChatRequest, sink: &mut dyn FnMut(&str)) -> Result<String> {
        let mut fragments = Vec::new();
        let completion = self.inner.complete(request, &mut |f: &str| {
            fragments.push(f.to_string());
            sink(f);
        })?;
        let mut entry = FixtureEntry::digest(request_digest(&request.messages), completion.clone());
        if request.stream && fragments.len() > 1 {
            entry.fragments = Some(fragments);
        }
        let line = serde_json::to_string(&entry).expect("fixture serializes");
        writeln!(self.out.lock(), "{line}").map_err(|e| GatewayError::Config(format!("fixture write: {e}")))?;
        Ok(completion)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>> {
        self.inner.embed(texts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::cosine;

    #[test]
    fn digest_is_stable_hex() {
        let d = request_digest(&[Message::user("say OK")]);
        assert_eq!(d.len(), 64);
        assert!(d.chars().all(|c| c.is_ascii_hexdigit() && !c.is_ascii_uppercase()));
        let json = r#"[{"role":"user","content":"say OK"}]"#;
        assert_eq!(d, hex::encode(Sha256::digest(json.as_bytes())));
    }

    #[test]
    fn seeded_vectors_are_unit_and_deterministic() {
        let a = seeded_hash_vector("a", 64);
        assert_eq!(a.len(), 64);
        assert!((cosine(&a, &a) - 1.0).abs() < 1e-6);
        assert_eq!(a, seeded_hash_vector("a", 64));
        assert_ne!(a, seeded_hash_vector("b", 64));
    }

    #[test]
    fn cosine_of_a_and_b_matches_direct_construction() {
        // Recompute the documented construction inline, independent of `gaussians`.
        fn direct(text: &str, d: usize) -> Vec<f64> {
            let h = Sha256::digest(text.as_bytes());
            let mut seed_bytes = [0u8; 8];
            seed_bytes.copy_from_slice(&h[..8]);
            let seed = u64::from_le_bytes(seed_bytes);
            let mut v = Vec::new();
            let mut i = 0u64;
            while v.len() < d {
                let mut u = [0.0f64; 2];
                for (j, slot) in u.iter_mut().enumerate() {
                    let mut z = seed.wrapping_add((i + j as u64).wrapping_mul(0x9E3779B97F4A7C15));
                    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
                    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
                    z ^= z >> 31;
                    *slot = ((z >> 11) + 1) as f64 / 9007199254740992.0;
                }
                i += 2;
                let r = (-2.0 * u[0].ln()).sqrt();
                v.push(r * (2.0 * std::f64::consts::PI * u[1]).cos());
                v.push(r * (2.0 * std::f64::consts::PI * u[1]).sin());
            }
            v.truncate(d);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| ((x / n) as f32) as f64).collect()
        }
        let (a, b) = (direct("a", 64), direct("b", 64));
        let expected: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let got = cosine(&seeded_hash_vector("a", 64), &seeded_hash_vector("b", 64));
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn trigram_mode_keeps_near_spellings_close() {
        let e = HashEmbedder { dimension: 256, mode: EmbeddingMode::CharTrigram };
        let near = cosine(&e.embed("Zhefu 802"), &e.embed("zhefu802"));
        let far = cosine(&e.embed("Zhefu 802"), &e.embed("Yongyou 12"));
        assert!((near - 1.0).abs() < 1e-6);
        assert!(far < 0.5);
    }

    #[test]
    fn rules_and_fragments() {
        let p = ScriptedProvider::new(vec![
            FixtureEntry::when_user("hello", "a b c").with_fragments(vec!["a ".into(), "b ".into(), "c".into()]),
            FixtureEntry::when_system("judge", "no"),
        ]);
        let mut got = Vec::new();
        let req = ChatRequest::new(vec![Message::user("hello there")]).stream(true);
        let out = p.complete(&req, &mut |f| got.push(f.to_string())).unwrap();
        assert_eq!(out, "a b c");
        assert_eq!(got, vec!["a ", "b ", "c"]);
        let req = ChatRequest::new(vec![Message::system("you judge"), Message::user("x")]);
        assert_eq!(p.complete(&req, &mut |_| {}).unwrap(), "no");
    }

    #[test]
    fn jsonl_parsing_rejects_keyless_lines() {
        assert!(ScriptedProvider::from_jsonl(r#"{"completion":"x"}"#).is_err());
        assert!(ScriptedProvider::from_jsonl("# comment\n\n").is_ok());
        assert!(ScriptedProvider::from_jsonl("{not json").is_err());
    }

    #[test]
    fn recorder_output_replays_byte_identical() {
        let live = Arc::new(ScriptedProvider::new(vec![FixtureEntry::when_user("", "recorded answer")]));
        let buf = Arc::new(Mutex::new(Vec::<u8>::new()));
        struct Shared(Arc<Mutex<Vec<u8>>>);
        impl Write for Shared {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                self.0.lock().extend_from_slice(b);
                Ok(b.len())
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let recorder = RecordingProvider::new(live, Box::new(Shared(buf.clone())));
        let conversation = vec![Message::system("be terse"), Message::user("first"), Message::assistant("ok")];
        let req = ChatRequest::new(conversation);
        let live_out = recorder.complete(&req, &mut |_| {}).unwrap();
        let text = String::from_utf8(buf.lock().clone()).unwrap();
        let replay = ScriptedProvider::from_jsonl(&text).unwrap();
        for _ in 0..3 {
            assert_eq!(replay.complete(&req, &mut |_| {}).unwrap(), live_out);
        }
    }
}
