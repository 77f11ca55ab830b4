//! Approximate tokenizer shared by the generation cap and the annotation
//! service's token budget.
//!
//! A token is either a maximal run of alphanumeric characters (ASCII or any
//! Unicode letter/digit) or a single non-whitespace, non-alphanumeric
//! character. Whitespace never counts. This over-approximates nothing and
//! under-approximates subword splits of long words; it is only used where no
//! backend tokenizer is available, and both consumers must agree on it.

use std::ops::Range;

/// Byte ranges of every token in `text`, in order.
pub fn token_spans(text: &str) -> Vec<Range<usize>> {
    let mut spans = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, ch) in text.char_indices() {
        if ch.is_alphanumeric() {
            if run_start.is_none() {
                run_start = Some(i);
            }
            continue;
        }
        if let Some(start) = run_start.take() {
            spans.push(start..i);
        }
        if !ch.is_whitespace() {
            spans.push(i..i + ch.len_utf8());
        }
    }
    if let Some(start) = run_start {
        spans.push(start..text.len());
    }
    spans
}

pub fn count_tokens(text: &str) -> usize {
    token_spans(text).len()
}

/// The longest prefix of `text` holding at most `max_tokens` tokens.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let spans = token_spans(text);
    if spans.len() <= max_tokens {
        return text;
    }
    match max_tokens {
        0 => "",
        n => &text[..spans[n - 1].end],
    }
}
