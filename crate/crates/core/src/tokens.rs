//! Engine token rule.
//!
//! Every budget in the engine (chunk size, overlap, context sections, prompt
//! windows) is measured with this rule instead of a model tokenizer:
//!
//! - each maximal run of word characters (alphanumeric or `_`, excluding CJK) is one token;
//! - each CJK character is one token;
//! - each other non-whitespace character is one token.

use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Class {
    Space,
    Word,
    Cjk,
    Punct,
}

/// Returns true for ideographs, kana and hangul syllables.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x3040..=0x30FF      // hiragana, katakana
        | 0x3400..=0x4DBF    // ext A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0x20000..=0x2FA1F) // ext B onwards
}

fn classify(c: char) -> Class {
    if c.is_whitespace() {
        Class::Space
    } else if is_cjk(c) {
        Class::Cjk
    } else if c.is_alphanumeric() || c == '_' {
        Class::Word
    } else {
        Class::Punct
    }
}

/// Number of engine tokens in `text`.
pub fn count_tokens(text: &str) -> usize {
    let mut count = 0;
    let mut in_word = false;
    for c in text.chars() {
        match classify(c) {
            Class::Word => {
                if !in_word {
                    count += 1;
                    in_word = true;
                }
            }
            Class::Space => in_word = false,
            Class::Cjk | Class::Punct => {
                count += 1;
                in_word = false;
            }
        }
    }
    count
}

/// Byte ranges of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans: Vec<Range<usize>> = Vec::new();
    let mut word_start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        let class = classify(c);
        if class != Class::Word {
            if let Some(start) = word_start.take() {
                spans.push(start..i);
            }
        }
        match class {
            Class::Word => {
                if word_start.is_none() {
                    word_start = Some(i);
                }
            }
            Class::Cjk | Class::Punct => spans.push(i..i + c.len_utf8()),
            Class::Space => {}
        }
    }
    if let Some(start) = word_start {
        spans.push(start..text.len());
    }
    spans
}

/// The token strings of `text`, in order.
pub fn tokenize(text: &str) -> Vec<&str> {
    token_spans(text).into_iter().map(|r| &text[r]).collect()
}

/// Longest prefix of `text` holding at most `budget` tokens, cut at a token boundary.
pub fn truncate_to_tokens(text: &str, budget: usize) -> &str {
    let spans = token_spans(text);
    if spans.len() <= budget {
        return text;
    }
    if budget == 0 {
        return "";
    }
    &text[..spans[budget - 1].end]
}
