//! Corpus loading, normalization and token-budgeted chunking.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::tokens::{is_cjk, token_spans};

pub const DEFAULT_CHUNK_SIZE: usize = 768;
pub const DEFAULT_CHUNK_OVERLAP: usize = 32;

const SUPPORTED_EXTENSIONS: &[&str] = &["txt", "text", "md", "markdown"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid split parameters: chunk_size {chunk_size} must exceed overlap {overlap}")]
    InvalidParameters { chunk_size: usize, overlap: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LanguageHint {
    Cjk,
    Latin,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub source_path: String,
    pub text: String,
    pub language_hint: LanguageHint,
}

impl Document {
    /// Builds a document from raw text; `text` is normalized first.
    pub fn new(source_path: impl Into<String>, raw: &str) -> Self {
        let text = normalize_text(raw);
        Self { doc_id: doc_id(&text), source_path: source_path.into(), language_hint: language_hint(&text), text }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: String,
    pub doc_id: String,
    pub ordinal: usize,
    pub text: String,
    pub token_count: usize,
    /// Character (Unicode scalar) offsets into the document text, end exclusive.
    pub char_span: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadWarning {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadOutcome {
    pub documents: Vec<Document>,
    pub warnings: Vec<LoadWarning>,
}

/// NFC, CRLF and lone CR to LF, NUL removed, trailing line whitespace
/// stripped, runs of blank lines collapsed to one, ends trimmed.
pub fn normalize_text(raw: &str) -> String {
    let nfc: String = raw.nfc().filter(|c| *c != '\0').collect();
    let unified = nfc.replace("\r\n", "\n").replace('\r', "\n");
    let mut out = String::with_capacity(unified.len());
    let mut blank_run = 0;
    for line in unified.split('\n') {
        let line = line.trim_end();
        if line.is_empty() {
            blank_run += 1;
            if blank_run > 1 {
                continue;
            }
        } else {
            blank_run = 0;
        }
        out.push_str(line);
        out.push('\n');
    }
    out.trim_matches('\n').to_string()
}

/// First 16 hex digits of SHA-256 over the normalized text.
pub fn doc_id(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn language_hint(text: &str) -> LanguageHint {
    let (mut cjk, mut other) = (0usize, 0usize);
    for c in text.chars() {
        if is_cjk(c) {
            cjk += 1;
        } else if c.is_alphabetic() {
            other += 1;
        }
    }
    let total = cjk + other;
    if total == 0 || cjk * 10 <= total {
        LanguageHint::Latin
    } else if cjk * 10 >= total * 9 {
        LanguageHint::Cjk
    } else {
        LanguageHint::Mixed
    }
}

fn is_supported(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| SUPPORTED_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Expands directories (recursively, sorted) into supported files; explicit
/// file paths are kept as given.
pub fn expand_paths(paths: &[PathBuf]) -> Result<Vec<PathBuf>, IngestError> {
    let mut out = Vec::new();
    for path in paths {
        if path.is_dir() {
            let mut found = Vec::new();
            collect_dir(path, &mut found)?;
            found.sort();
            out.extend(found);
        } else {
            out.push(path.clone());
        }
    }
    Ok(out)
}

fn collect_dir(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), IngestError> {
    let entries = fs::read_dir(dir).map_err(|source| IngestError::Io { path: dir.into(), source })?;
    for entry in entries {
        let path = entry.map_err(|source| IngestError::Io { path: dir.into(), source })?.path();
        if path.is_dir() {
            collect_dir(&path, out)?;
        } else if is_supported(&path) {
            out.push(path);
        }
    }
    Ok(())
}

pub fn load_documents(paths: &[PathBuf]) -> Result<LoadOutcome, IngestError> {
    let mut outcome = LoadOutcome::default();
    for path in paths {
        if !is_supported(path) {
            return Err(IngestError::UnsupportedFormat(path.clone()));
        }
        let bytes = fs::read(path).map_err(|source| IngestError::Io { path: path.clone(), source })?;
        let raw = String::from_utf8(bytes).map_err(|_| IngestError::UnsupportedFormat(path.clone()))?;
        let doc = Document::new(path.display().to_string(), &raw);
        if doc.text.is_empty() {
            tracing::warn!(path = %path.display(), "skipping empty document");
            outcome.warnings.push(LoadWarning { path: doc.source_path, reason: "empty document".into() });
            continue;
        }
        outcome.documents.push(doc);
    }
    Ok(outcome)
}

/// Boundary strength between token `b - 1` and token `b`, best first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Boundary {
    Paragraph,
    Sentence,
    Clause,
    Whitespace,
}

const SENTENCE_END: &[&str] = &[".", "!", "?", "。", "！", "？"];
const CLAUSE_END: &[&str] = &[",", ";", "，", "；"];

fn boundary_at(text: &str, spans: &[std::ops::Range<usize>], b: usize) -> Option<Boundary> {
    let prev = &text[spans[b - 1].clone()];
    let gap = &text[spans[b - 1].end..spans[b].start];
    if gap.matches('\n').count() >= 2 {
        Some(Boundary::Paragraph)
    } else if SENTENCE_END.contains(&prev) {
        Some(Boundary::Sentence)
    } else if CLAUSE_END.contains(&prev) {
        Some(Boundary::Clause)
    } else if !gap.is_empty() {
        Some(Boundary::Whitespace)
    } else {
        None
    }
}

/// Splits `document` into chunks of at most `chunk_size` engine tokens.
///
/// Each chunk after the first re-includes the trailing `overlap` tokens of
/// its predecessor. The new content of a chunk ends at the latest boundary
/// inside the window, preferring paragraph breaks, then sentence-final
/// punctuation, clause punctuation, whitespace, and finally a hard cut.
pub fn split(document: &Document, chunk_size: usize, overlap: usize) -> Result<Vec<Chunk>, IngestError> {
    if chunk_size <= overlap {
        return Err(IngestError::InvalidParameters { chunk_size, overlap });
    }
    let text = &document.text;
    let spans = token_spans(text);
    let n = spans.len();
    if n == 0 {
        return Ok(Vec::new());
    }

    // Token index where each chunk's new content ends.
    let mut cuts = Vec::new();
    let mut content_start = 0usize;
    loop {
        let window_start = if cuts.is_empty() { 0 } else { content_start - overlap };
        let limit = window_start + chunk_size;
        if limit >= n {
            cuts.push(n);
            break;
        }
        let lowest = content_start.max(window_start + overlap) + 1;
        let mut best: Option<(Boundary, usize)> = None;
        for b in (lowest..=limit).rev() {
            if let Some(kind) = boundary_at(text, &spans, b) {
                if best.is_none_or(|(k, _)| kind < k) {
                    best = Some((kind, b));
                    if kind == Boundary::Paragraph {
                        break;
                    }
                }
            }
        }
        let cut = best.map_or(limit, |(_, b)| b);
        cuts.push(cut);
        content_start = cut;
    }

    let byte_to_char = |byte: usize| text[..byte].chars().count();
    let mut chunks = Vec::with_capacity(cuts.len());
    let mut prev_cut = 0usize;
    for (ordinal, &cut) in cuts.iter().enumerate() {
        let start_byte = if ordinal == 0 { 0 } else { spans[prev_cut - overlap].start };
        let end_byte = if cut == n { text.len() } else { spans[cut].start };
        let chunk_text = &text[start_byte..end_byte];
        chunks.push(Chunk {
            chunk_id: format!("{}-{ordinal:04}", document.doc_id),
            doc_id: document.doc_id.clone(),
            ordinal,
            text: chunk_text.to_string(),
            token_count: crate::tokens::count_tokens(chunk_text),
            char_span: (byte_to_char(start_byte), byte_to_char(end_byte)),
        });
        prev_cut = cut;
    }
    Ok(chunks)
}

/// Inverse of [`split`]: drops each chunk's overlap prefix and concatenates.
pub fn reconstruct(chunks: &[Chunk]) -> String {
    let mut out = String::new();
    let mut covered = 0usize;
    for chunk in chunks {
        let skip = covered.saturating_sub(chunk.char_span.0);
        out.extend(chunk.text.chars().skip(skip));
        covered = chunk.char_span.1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::count_tokens;
    use proptest::prelude::*;

    fn doc(text: &str) -> Document {
        Document::new("mem", text)
    }

    #[test]
    fn crlf_is_normalized() {
        assert_eq!(doc("abc\r\ndef").text, "abc\ndef");
        assert_eq!(doc("a\0b\rc").text, "ab\nc");
    }

    #[test]
    fn doc_id_depends_on_content_only() {
        assert_eq!(Document::new("x.txt", "same").doc_id, Document::new("y.md", "same\r\n").doc_id);
        assert_ne!(doc("one").doc_id, doc("two").doc_id);
    }

    #[test]
    fn markdown_paragraphs_survive() {
        let raw = "# Rice  \r\n\r\n\r\nZhefu 802 is early.   \r\nIt is short.\r\n\r\nIt yields well.\r\n";
        assert_eq!(doc(raw).text, "# Rice\n\nZhefu 802 is early.\nIt is short.\n\nIt yields well.");
    }

    #[test]
    fn language_hints() {
        assert_eq!(doc("rice paddy").language_hint, LanguageHint::Latin);
        assert_eq!(doc("水稻品种").language_hint, LanguageHint::Cjk);
        assert_eq!(doc("水稻 rice").language_hint, LanguageHint::Mixed);
    }

    #[test]
    fn short_document_is_one_chunk() {
        let d = doc("one two three four five six seven eight nine ten");
        let chunks = split(&d, 768, 32).unwrap();
        assert_eq!(chunks.len(), 1);
        assert_eq!(chunks[0].text, d.text);
        assert_eq!(chunks[0].token_count, 10);
        assert_eq!(chunks[0].char_span, (0, d.text.chars().count()));
    }

    #[test]
    fn empty_document_has_no_chunks() {
        assert!(split(&doc(""), 768, 32).unwrap().is_empty());
    }

    #[test]
    fn parameters_are_checked() {
        assert!(split(&doc("x"), 32, 32).is_err());
    }

    /// Brute-force statement of the rule for the sentence corpus: the first
    /// chunk ends at the last sentence end at or before token 768.
    #[test]
    fn sentence_document_splits_near_window_end() {
        let sentence = "w1 w2 w3 w4 w5 w6 w7 w8 w9.";
        assert_eq!(count_tokens(sentence), 10);
        let text = vec![sentence; 100].join(" ");
        let d = doc(&text);
        assert_eq!(count_tokens(&d.text), 1000);
        let chunks = split(&d, 768, 32).unwrap();
        assert_eq!(chunks.len(), 2);

        let spans = token_spans(&d.text);
        let oracle_cut = (1..=768).rev().find(|&b| &d.text[spans[b - 1].clone()] == ".").unwrap();
        assert_eq!(oracle_cut, 760);
        assert!(oracle_cut.abs_diff(736) <= 32);
        assert_eq!(chunks[0].token_count, 760);
        assert_eq!(chunks[1].token_count, 1000 - 760 + 32);
        assert!(chunks[1].text.starts_with("w9. w1"));
        assert_eq!(reconstruct(&chunks), d.text);
    }

    #[test]
    fn unbroken_cjk_run_is_hard_cut() {
        let text: String = std::iter::repeat_n('稻', 800).collect();
        let chunks = split(&doc(&text), 768, 32).unwrap();
        assert_eq!(chunks.iter().map(|c| c.token_count).collect::<Vec<_>>(), vec![768, 64]);
        assert_eq!(chunks[1].char_span, (736, 800));
    }

    #[test]
    fn space_separated_words_cut_at_window() {
        let text = vec!["w"; 800].join(" ");
        let chunks = split(&doc(&text), 768, 32).unwrap();
        assert_eq!(chunks[0].token_count, 768);
        assert_eq!(chunks[1].token_count, 64);
    }

    #[test]
    fn paragraph_break_beats_later_sentence() {
        let text = "a b c.\n\nd e f. g h i. j k";
        let chunks = split(&doc(text), 10, 1).unwrap();
        assert_eq!(chunks[0].text, "a b c.\n\n");
    }

    #[test]
    fn loads_files_and_skips_empty_ones() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.md");
        let c = dir.path().join("c.pdf");
        fs::write(&a, "abc\r\ndef").unwrap();
        fs::write(&b, "  \n").unwrap();
        fs::write(&c, "x").unwrap();
        let out = load_documents(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.documents.len(), 1);
        assert_eq!(out.documents[0].text, "abc\ndef");
        assert_eq!(out.warnings.len(), 1);
        assert!(matches!(load_documents(&[c]), Err(IngestError::UnsupportedFormat(_))));
        assert!(matches!(load_documents(&[dir.path().join("missing.txt")]), Err(IngestError::Io { .. })));
        let expanded = expand_paths(&[dir.path().to_path_buf()]).unwrap();
        assert_eq!(expanded, vec![a, b]);
    }

    fn corpus() -> impl Strategy<Value = String> {
        prop::collection::vec(
            prop_oneof![
                "[a-z]{1,8}",
                "[水稻品种浙辅高产抗病]{1,6}",
                Just(". ".to_string()),
                Just("。".to_string()),
                Just(", ".to_string()),
                Just(" ".to_string()),
                Just("\n\n".to_string()),
                "[0-9]{1,4}",
            ],
            0..400,
        )
        .prop_map(|parts| parts.concat())
    }

    proptest! {
        #[test]
        fn chunks_fit_overlap_and_reconstruct(text in corpus(), size in 8usize..80, overlap in 0usize..8) {
            let d = doc(&text);
            let chunks = split(&d, size, overlap).unwrap();
            for c in &chunks {
                prop_assert!(c.token_count <= size);
                prop_assert_eq!(c.token_count, count_tokens(&c.text));
            }
            for pair in chunks.windows(2) {
                let shared: String = pair[1].text.chars().take(pair[0].char_span.1 - pair[1].char_span.0).collect();
                prop_assert_eq!(count_tokens(&shared), overlap);
                prop_assert!(pair[0].char_span.1 > pair[1].char_span.0 || overlap == 0);
            }
            prop_assert_eq!(reconstruct(&chunks), d.text.clone());
            let again = split(&doc(&reconstruct(&chunks)), size, overlap).unwrap();
            prop_assert_eq!(again, chunks);
        }
    }
}
