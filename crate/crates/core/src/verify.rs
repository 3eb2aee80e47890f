//! Argument and result checks around answer generation.
//!
//! The argument check asks whether the retrieved context can answer the
//! question; the result check asks whether a generated answer is coherent
//! with both. Both are binary judge calls that also accept "support".

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, JudgeVerdict, Message, Purpose};
use crate::logic::History;
use crate::prompts;
use crate::retrieval::ContextBundle;
use crate::tokens::{count_tokens, truncate_to_tokens};

/// Extra affirmative accepted by both checks.
pub const SUPPORT: &str = "support";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifyConfig {
    pub judge_temperature: f32,
    pub generate_temperature: f32,
    pub generate_max_output_tokens: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { judge_temperature: 0.0, generate_temperature: 0.0, generate_max_output_tokens: 1024 }
    }
}

/// What the answer is generated from.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Bundle(&'a ContextBundle),
    History(&'a History),
}

impl Evidence<'_> {
    pub fn render(&self) -> String {
        match self {
            Self::Bundle(b) => b.render(),
            Self::History(h) => h.render(),
        }
    }
}

const JUDGE_OUTPUT_TOKENS: usize = 16;

fn fit(gateway: &Gateway, fixed: usize, context: &str, reserve: usize) -> String {
    let budget = gateway.prompt_budget(reserve).saturating_sub(fixed);
    truncate_to_tokens(context, budget).to_string()
}

fn check_messages(system: &str, user: String) -> Vec<Message> {
    vec![Message::system(system), Message::user(user)]
}

pub fn argument_messages(gateway: &Gateway, query: &str, context: &str) -> Vec<Message> {
    let fixed = count_tokens(prompts::ARGUMENT_CHECK) + count_tokens(query) + 8;
    let context = fit(gateway, fixed, context, JUDGE_OUTPUT_TOKENS);
    check_messages(prompts::ARGUMENT_CHECK, format!("Question: {query}\n\nContext:\n{context}"))
}

pub fn result_messages(gateway: &Gateway, query: &str, context: &str, answer: &str) -> Vec<Message> {
    let fixed = count_tokens(prompts::RESULT_CHECK) + count_tokens(query) + count_tokens(answer) + 12;
    let context = fit(gateway, fixed, context, JUDGE_OUTPUT_TOKENS);
    check_messages(prompts::RESULT_CHECK, format!("Question: {query}\n\nContext:\n{context}\n\nAnswer: {answer}"))
}

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("context is empty")]
    EmptyContext,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckMode {
    /// Judge the context first; generate only when it is sufficient.
    #[default]
    Argument,
    /// Generate first, then judge the answer.
    Result,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Support {
    Supported,
    Unsupported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationOutcome {
    pub mode: CheckMode,
    pub verdict: Support,
    /// Raw judge completion.
    pub judged_text: String,
    pub generation: Option<String>,
}

impl VerificationOutcome {
    pub fn is_supported(&self) -> bool {
        self.verdict == Support::Supported
    }
}

pub fn support(verdict: &JudgeVerdict) -> Support {
    if verdict.is_yes() {
        Support::Supported
    } else {
        Support::Unsupported
    }
}

fn non_empty(evidence: Evidence<'_>) -> Result<String, VerificationError> {
    let text = evidence.render();
    let empty = match evidence {
        Evidence::Bundle(b) => b.is_empty(),
        Evidence::History(h) => h.entries.is_empty(),
    };
    if empty {
        Err(VerificationError::EmptyContext)
    } else {
        Ok(text)
    }
}

/// The argument judge alone: is the context sufficient for the question?
pub fn judge_argument(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
) -> Result<JudgeVerdict, VerificationError> {
    let context = non_empty(evidence)?;
    let messages = argument_messages(gateway, query, &context);
    Ok(gateway.judge_messages(Purpose::ArgumentJudge, messages, &[SUPPORT], config.judge_temperature)?)
}

/// The result judge alone: is `answer` coherent with the question and context?
pub fn judge_result(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    answer: &str,
    config: &VerifyConfig,
) -> Result<JudgeVerdict, VerificationError> {
    let context = non_empty(evidence)?;
    let messages = result_messages(gateway, query, &context, answer);
    Ok(gateway.judge_messages(Purpose::ResultJudge, messages, &[SUPPORT], config.judge_temperature)?)
}

/// One judge call over (query, context); generates only on a supported verdict.
pub fn argument_check(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
    sink: Option<&mut dyn FnMut(&str)>,
) -> Result<VerificationOutcome, VerificationError> {
    let verdict = judge_argument(gateway, query, evidence, config)?;
    let generation = match verdict.is_yes() {
        true => Some(generate_answer(gateway, query, evidence, config, sink)?),
        false => None,
    };
    Ok(VerificationOutcome {
        mode: CheckMode::Argument,
        verdict: support(&verdict),
        judged_text: verdict.raw_text,
        generation,
    })
}

/// One generation call, then one judge call over (query, context, reply).
/// The generation is kept whatever the verdict.
pub fn result_check(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
    sink: Option<&mut dyn FnMut(&str)>,
) -> Result<VerificationOutcome, VerificationError> {
    non_empty(evidence)?;
    let answer = generate_answer(gateway, query, evidence, config, sink)?;
    let verdict = judge_result(gateway, query, evidence, &answer, config)?;
    Ok(VerificationOutcome {
        mode: CheckMode::Result,
        verdict: support(&verdict),
        judged_text: verdict.raw_text,
        generation: Some(answer),
    })
}

pub fn check(
    mode: CheckMode,
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
    sink: Option<&mut dyn FnMut(&str)>,
) -> Result<VerificationOutcome, VerificationError> {
    match mode {
        CheckMode::Argument => argument_check(gateway, query, evidence, config, sink),
        CheckMode::Result => result_check(gateway, query, evidence, config, sink),
    }
}

/// Drops lines from the tail of the sources, then relationships, then
/// entities until the rendering fits `budget` tokens.
pub fn truncate_bundle(bundle: &ContextBundle, budget: usize) -> ContextBundle {
    let mut b = bundle.clone();
    while b.token_count() > budget {
        if b.chunk_section.pop().is_some() {
            b.chunk_ids.pop();
        } else if b.edge_section.pop().is_some() {
            b.edge_ids.pop();
        } else if b.node_section.pop().is_some() {
            b.node_ids.pop();
        } else {
            break;
        }
    }
    b
}

pub fn generation_messages(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
) -> Vec<Message> {
    let fixed = count_tokens(prompts::GENERATE) + count_tokens(query);
    let budget = gateway.prompt_budget(config.generate_max_output_tokens).saturating_sub(fixed);
    let context = match evidence {
        Evidence::Bundle(b) => truncate_bundle(b, budget).render(),
        Evidence::History(h) => truncate_to_tokens(&h.render(), budget).to_string(),
    };
    vec![Message::system(prompts::render(prompts::GENERATE, &[("context", &context)])), Message::user(query)]
}

/// Generates the answer, streaming fragments to `sink` when given.
pub fn generate_answer(
    gateway: &Gateway,
    query: &str,
    evidence: Evidence<'_>,
    config: &VerifyConfig,
    sink: Option<&mut dyn FnMut(&str)>,
) -> Result<String, GatewayError> {
    let request = ChatRequest::new(generation_messages(gateway, query, evidence, config))
        .temperature(config.generate_temperature)
        .max_output_tokens(config.generate_max_output_tokens)
        .stream(sink.is_some());
    gateway.chat(Purpose::Generate, &request, sink)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{CallKind, FixtureEntry, ProviderConfig, ScriptedProvider};
    use std::sync::Arc;

    fn bundle() -> ContextBundle {
        ContextBundle {
            node_section: vec!["[a] A (t): alpha".into(), "[b] B (t): beta".into()],
            node_ids: vec!["a".into(), "b".into()],
            edge_section: vec!["[a -> b] A -> B: linked (keywords: k; weight: 1)".into()],
            edge_ids: vec![("a".into(), "b".into())],
            chunk_section: vec!["[c1] one two three".into(), "[c2] four five six".into()],
            chunk_ids: vec!["c1".into(), "c2".into()],
            ..Default::default()
        }
    }

    #[test]
    fn truncation_drops_sources_first() {
        let b = bundle();
        let full = b.token_count();
        let t = truncate_bundle(&b, full - 1);
        assert_eq!(t.chunk_ids, vec!["c1"]);
        assert_eq!(t.node_ids.len(), 2);
        let t = truncate_bundle(&b, count_tokens(&ContextBundle::default().render()) + 12);
        assert!(t.chunk_ids.is_empty() && t.edge_ids.is_empty());
        assert_eq!(t.node_ids, vec!["a"]);
        assert_eq!(truncate_bundle(&b, full), b);
    }

    #[test]
    fn argument_mode_generates_only_when_supported() {
        let b = bundle();
        let config = VerifyConfig::default();
        for (reply, supported) in [("Support.", true), ("no, the context lacks it", false)] {
            let gw = Gateway::scripted(ScriptedProvider::new(vec![
                FixtureEntry::when_system("sufficient", reply),
                FixtureEntry::when_user("q?", "an answer"),
            ]));
            let out = argument_check(&gw, "q?", Evidence::Bundle(&b), &config, None).unwrap();
            assert_eq!(out.is_supported(), supported);
            assert_eq!(out.generation.is_some(), supported);
            let kinds: Vec<_> = gw.calls().iter().map(|c| (c.kind, c.purpose)).collect();
            let mut expected = vec![(CallKind::Judge, Purpose::ArgumentJudge)];
            if supported {
                expected.push((CallKind::Chat, Purpose::Generate));
            }
            assert_eq!(kinds, expected);
        }
    }

    #[test]
    fn result_mode_generates_before_judging() {
        let gw = Gateway::scripted(ScriptedProvider::new(vec![
            FixtureEntry::when_system("coherent", "no"),
            FixtureEntry::when_user("q?", "an answer"),
        ]));
        let out = result_check(&gw, "q?", Evidence::Bundle(&bundle()), &VerifyConfig::default(), None).unwrap();
        assert!(!out.is_supported());
        assert_eq!(out.generation.as_deref(), Some("an answer"));
        let calls = gw.calls();
        assert_eq!(calls.len(), 2);
        assert_eq!((calls[0].kind, calls[1].kind), (CallKind::Chat, CallKind::Judge));
        assert!(calls[0].seq < calls[1].seq);
    }

    #[test]
    fn empty_context_is_rejected() {
        let gw = Gateway::scripted(ScriptedProvider::default());
        let empty = ContextBundle::default();
        let r = argument_check(&gw, "q?", Evidence::Bundle(&empty), &VerifyConfig::default(), None);
        assert!(matches!(r, Err(VerificationError::EmptyContext)));
        assert!(gw.calls().is_empty());
    }

    #[test]
    fn generation_fits_small_windows() {
        let provider = ScriptedProvider::new(vec![
            FixtureEntry::when_user("q?", "answer").with_fragments(vec!["ans".into(), "wer".into()])
        ]);
        let config = ProviderConfig { max_context_tokens: 1024, ..Default::default() };
        let gw = Gateway::new(Arc::new(provider), config).unwrap();
        let mut big = bundle();
        for i in 0..400 {
            big.chunk_section.push(format!("[x{i}] filler words here"));
            big.chunk_ids.push(format!("x{i}"));
        }
        let vconfig = VerifyConfig { generate_max_output_tokens: 256, ..Default::default() };
        let messages = generation_messages(&gw, "q?", Evidence::Bundle(&big), &vconfig);
        let used: usize = messages.iter().map(|m| count_tokens(&m.content)).sum();
        assert!(used <= 1024 - 256, "{used}");
        assert!(messages[0].content.contains("[a] A (t): alpha"));
        let mut streamed = String::new();
        let answer =
            generate_answer(&gw, "q?", Evidence::Bundle(&big), &vconfig, Some(&mut |f: &str| streamed.push_str(f)))
                .unwrap();
        assert_eq!(answer, "answer");
        assert_eq!(streamed, "answer");
    }
}
