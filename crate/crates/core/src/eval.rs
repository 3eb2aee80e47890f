//! Evaluation harness and scoring.
//!
//! Datasets are JSON lines `{question, kind, gold, options?}`. Scores:
//! - `multiple_choice`: 1 if the first standalone option label in the
//!   prediction equals the gold label, else 0. Labels are `A`, `B`, ... in
//!   option order and match case-sensitively as whole engine tokens, so
//!   "The answer is B." yields `B` while "Bt" yields nothing.
//! - `short_answer`: token F1 over lowercased engine tokens (punctuation
//!   tokens dropped), counting multiplicity.
//! - `generation`: ROUGE-L F1 (longest common subsequence) over the same
//!   tokens.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::QueryMode;
use crate::orchestrator::Engine;
use crate::tokens::tokenize;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("multiple-choice question has no options")]
    MissingOptions,
    #[error("{path}:{line}: {message}")]
    Dataset { path: String, line: usize, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    MultipleChoice,
    ShortAnswer,
    Generation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    pub question: String,
    pub kind: QuestionKind,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
}

/// Option labels for `n` options: `A`, `B`, ...
pub fn option_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| char::from(b'A' + (i % 26) as u8).to_string()).collect()
}

/// First engine token of `prediction` that is exactly one of `labels`.
pub fn extract_option(prediction: &str, labels: &[String]) -> Option<String> {
    tokenize(prediction).into_iter().find(|t| labels.iter().any(|l| l == t)).map(str::to_string)
}

fn scoring_tokens(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| t.chars().any(char::is_alphanumeric)).map(str::to_lowercase).collect()
}

fn f1(overlap: usize, predicted: usize, gold: usize) -> f64 {
    if overlap == 0 {
        return 0.0;
    }
    let p = overlap as f64 / predicted as f64;
    let r = overlap as f64 / gold as f64;
    2.0 * p * r / (p + r)
}

/// Multiset token F1. Two empty texts score 1.
pub fn token_f1(gold: &str, predicted: &str) -> f64 {
    let (g, p) = (scoring_tokens(gold), scoring_tokens(predicted));
    if g.is_empty() || p.is_empty() {
        return if g.is_empty() && p.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }
    f1(overlap, p.len(), g.len())
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// ROUGE-L F1. Two empty texts score 1.
pub fn rouge_l_f1(gold: &str, predicted: &str) -> f64 {
    let (g, p) = (scoring_tokens(gold), scoring_tokens(predicted));
    if g.is_empty() || p.is_empty() {
        return if g.is_empty() && p.is_empty() { 1.0 } else { 0.0 };
    }
    f1(lcs_len(&g, &p), p.len(), g.len())
}

pub fn score(kind: QuestionKind, gold: &str, predicted: &str, options: Option<&[String]>) -> Result<f64, EvalError> {
    match kind {
        QuestionKind::MultipleChoice => {
            let options = options.filter(|o| !o.is_empty()).ok_or(EvalError::MissingOptions)?;
            let labels = option_labels(options.len());
            Ok(match extract_option(predicted, &labels) {
                Some(label) if label == gold.trim() => 1.0,
                _ => 0.0,
            })
        }
        QuestionKind::ShortAnswer => Ok(token_f1(gold, predicted)),
        QuestionKind::Generation => Ok(rouge_l_f1(gold, predicted)),
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<EvalItem>, EvalError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: shown.clone(), source })?;
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let item: EvalItem = serde_json::from_str(line).map_err(|e| EvalError::Dataset {
            path: shown.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if item.kind == QuestionKind::MultipleChoice && item.options.as_ref().is_none_or(Vec::is_empty) {
            return Err(EvalError::Dataset {
                path: shown,
                line: i + 1,
                message: "multiple_choice needs options".into(),
            });
        }
        items.push(item);
    }
    Ok(items)
}

/// The question as asked: multiple-choice options are appended as
/// labelled lines unless already labelled.
pub fn render_question(item: &EvalItem) -> String {
    let mut q = item.question.trim().to_string();
    if let Some(options) = &item.options {
        for (label, option) in option_labels(options.len()).iter().zip(options) {
            let option = option.trim();
            let labelled = [".", ")", ":", "、"].iter().any(|sep| option.starts_with(&format!("{label}{sep}")));
            if labelled {
                q.push_str(&format!("\n{option}"));
            } else {
                q.push_str(&format!("\n{label}. {option}"));
            }
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub question: String,
    pub kind: QuestionKind,
    pub gold: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    /// The extracted label for multiple choice, the answer text otherwise.
    pub predicted: String,
    pub answer: String,
    pub score: f64,
    pub final_path: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KindMetrics {
    pub count: usize,
    pub mean_score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub mean_score: f64,
    /// Mean over multiple-choice records, if any.
    pub accuracy: Option<f64>,
    pub by_kind: BTreeMap<QuestionKind, KindMetrics>,
    pub final_paths: BTreeMap<String, usize>,
    pub errors: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: QueryMode,
    pub config: serde_json::Value,
    pub records: Vec<EvalRecord>,
    pub metrics: EvalMetrics,
}

pub fn aggregate(records: &[EvalRecord]) -> EvalMetrics {
    let mut m = EvalMetrics { count: records.len(), ..Default::default() };
    if records.is_empty() {
        return m;
    }
    let mut sums: BTreeMap<QuestionKind, f64> = BTreeMap::new();
    for r in records {
        let k = m.by_kind.entry(r.kind).or_default();
        k.count += 1;
        *sums.entry(r.kind).or_default() += r.score;
        if let Some(p) = &r.final_path {
            *m.final_paths.entry(p.clone()).or_default() += 1;
        }
        m.errors += usize::from(r.error.is_some());
    }
    for (kind, k) in m.by_kind.iter_mut() {
        k.mean_score = sums[kind] / k.count as f64;
    }
    m.mean_score = sums.values().sum::<f64>() / records.len() as f64;
    m.accuracy = m.by_kind.get(&QuestionKind::MultipleChoice).map(|k| k.mean_score);
    m
}

fn evaluate_one(engine: &Engine, index: usize, item: &EvalItem, mode: QueryMode) -> EvalRecord {
    let outcome = engine.answer(&render_question(item), mode, &mut |_| {});
    let (answer, final_path, error) = match outcome {
        Ok(o) => (o.answer, Some(o.trace.final_path.as_str().to_string()), None),
        Err(e) => (String::new(), None, Some(e.to_string())),
    };
    let (predicted, score) = match item.kind {
        QuestionKind::MultipleChoice => {
            let labels = option_labels(item.options.as_ref().map_or(0, Vec::len));
            let predicted = extract_option(&answer, &labels).unwrap_or_default();
            let s = score(item.kind, &item.gold, &answer, item.options.as_deref()).unwrap_or(0.0);
            (predicted, s)
        }
        kind => (answer.clone(), score(kind, &item.gold, &answer, None).unwrap_or(0.0)),
    };
    EvalRecord {
        index,
        question: item.question.clone(),
        kind: item.kind,
        gold: item.gold.clone(),
        options: item.options.clone(),
        predicted,
        answer,
        score,
        final_path,
        error,
    }
}

/// Answers every item, up to `concurrency` at a time. Records keep
/// dataset order.
pub fn run_eval(engine: &Engine, items: &[EvalItem], mode: QueryMode, concurrency: usize) -> EvalReport {
    use rayon::prelude::*;
    let work = || -> Vec<EvalRecord> {
        items.par_iter().enumerate().map(|(i, item)| evaluate_one(engine, i, item, mode)).collect()
    };
    let records = match rayon::ThreadPoolBuilder::new().num_threads(concurrency.max(1)).build() {
        Ok(pool) => pool.install(work),
        Err(_) => work(),
    };
    let metrics = aggregate(&records);
    EvalReport {
        mode,
        config: serde_json::to_value(engine.config()).unwrap_or(serde_json::Value::Null),
        records,
        metrics,
    }
}
