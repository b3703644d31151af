//! Final-answer extraction from `boxed{...}` blocks and canonical forms for voting.

use serde::{Deserialize, Serialize};

const BOX_OPEN: &str = "boxed{";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    Numeric,
    Letter,
    Freeform,
}

/// Content of every complete `boxed{...}` block, in order of appearance.
pub fn boxed_contents(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(rel) = text[from..].find(BOX_OPEN) {
        let start = from + rel + BOX_OPEN.len();
        let mut depth = 1usize;
        let mut end = None;
        for (i, ch) in text[start..].char_indices() {
            match ch {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(end) = end {
            out.push(&text[start..end]);
        }
        from = start;
    }
    out
}

/// The trimmed content of the last complete box, if it is valid for `mode`.
pub fn extract_answer(text: &str, mode: AnswerMode) -> Option<String> {
    let content = boxed_contents(text).pop()?.trim();
    if is_valid(content, mode) {
        Some(content.to_string())
    } else {
        None
    }
}

fn is_valid(content: &str, mode: AnswerMode) -> bool {
    match mode {
        AnswerMode::Numeric => split_decimal(content).is_some(),
        AnswerMode::Letter => matches!(content, "A" | "B" | "C" | "D"),
        AnswerMode::Freeform => !content.is_empty(),
    }
}

/// Splits a decimal literal into (negative, integer digits, fraction digits).
fn split_decimal(s: &str) -> Option<(bool, &str, &str)> {
    let (negative, body) = match s.as_bytes().first()? {
        b'-' => (true, &s[1..]),
        b'+' => (false, &s[1..]),
        _ => (false, s),
    };
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, f),
        None => (body, ""),
    };
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !digits(int) || !digits(frac) {
        return None;
    }
    if body.ends_with('.') && int.is_empty() {
        return None;
    }
    Some((negative, int, frac))
}

/// Normal form used for equality in votes and metrics. Numeric answers become
/// normalized decimal strings, so `204`, `204.0` and `+0204.00` agree.
pub fn canonicalize(answer: &str, mode: AnswerMode) -> Option<String> {
    let trimmed = answer.trim();
    match mode {
        AnswerMode::Numeric => {
            let (negative, int, frac) = split_decimal(trimmed)?;
            let int = int.trim_start_matches('0');
            let frac = frac.trim_end_matches('0');
            let int = if int.is_empty() { "0" } else { int };
            let zero = int == "0" && frac.is_empty();
            let mut out = String::new();
            if negative && !zero {
                out.push('-');
            }
            out.push_str(int);
            if !frac.is_empty() {
                out.push('.');
                out.push_str(frac);
            }
            Some(out)
        }
        _ => is_valid(trimmed, mode).then(|| trimmed.to_string()),
    }
}
