//! Deterministic whitespace/punctuation tokenizer with character-span tracking.
//!
//! Offsets are counted in Unicode scalar values (not bytes), so they line up
//! with the offsets an external aligner computes over the same text.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    /// Case-folded token text.
    pub text: String,
    pub start_char: usize,
    /// Exclusive.
    pub end_char: usize,
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00BF}'
                | '\u{00A1}'
                | '\u{00AB}'
                | '\u{00BB}'
        )
}

fn push(tokens: &mut Vec<Token>, chars: &[char], start: usize, end: usize) {
    let text: String = chars[start..end].iter().collect();
    tokens.push(Token {
        text: text.to_lowercase(),
        start_char: start,
        end_char: end,
    });
}

/// Splits on whitespace, then peels leading and trailing punctuation marks
/// off each word as single-character tokens.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let word_start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        let word_end = i;

        let mut lo = word_start;
        while lo < word_end && is_punct(chars[lo]) {
            push(&mut tokens, &chars, lo, lo + 1);
            lo += 1;
        }
        if lo == word_end {
            continue;
        }
        let mut hi = word_end;
        while hi > lo && is_punct(chars[hi - 1]) {
            hi -= 1;
        }
        push(&mut tokens, &chars, lo, hi);
        for p in hi..word_end {
            push(&mut tokens, &chars, p, p + 1);
        }
    }
    tokens
}

/// Trims and collapses every run of whitespace to a single space.
pub fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders tokens back to text: adjacent tokens that touched in the source are
/// joined without a space, all others with exactly one space.
pub fn join_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for (i, tok) in tokens.iter().enumerate() {
        if i > 0 && tokens[i - 1].end_char != tok.start_char {
            out.push(' ');
        }
        out.push_str(&tok.text);
    }
    out
}

/// Leftmost contiguous token window whose rendered text equals the
/// case-folded, whitespace-normalized `value`. Indices are inclusive.
pub fn find_value_span(question_tokens: &[Token], value: &str) -> Option<(usize, usize)> {
    let target = normalize_whitespace(&value.to_lowercase());
    if target.is_empty() {
        return None;
    }
    for start in 0..question_tokens.len() {
        let mut rendered = String::new();
        for end in start..question_tokens.len() {
            if end > start && question_tokens[end - 1].end_char != question_tokens[end].start_char {
                rendered.push(' ');
            }
            rendered.push_str(&question_tokens[end].text);
            if rendered.len() > target.len() || !target.starts_with(rendered.as_str()) {
                break;
            }
            if rendered == target {
                return Some((start, end));
            }
        }
    }
    None
}

/// Original-case substring covered by tokens `start..=end`.
///
/// Panics if the indices are out of range or reversed.
pub fn extract_span(question: &str, tokens: &[Token], start: usize, end: usize) -> String {
    assert!(
        start <= end && end < tokens.len(),
        "span ({start}, {end}) out of range for {} tokens",
        tokens.len()
    );
    let from = tokens[start].start_char;
    let to = tokens[end].end_char;
    question.chars().skip(from).take(to - from).collect()
}
