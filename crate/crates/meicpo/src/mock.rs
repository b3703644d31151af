//! A deterministic scripted generator for tests and offline runs.

use std::path::Path;
use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{MeIcpoError, Result};
use crate::generator::{
    count_tokens, GenerateFailure, Generator, GeneratorRequest, GeneratorResponse, Purpose, Usage,
};

const ANSWER_START: &str = "[Answer start]\n";
const ANSWER_END: &str = "\n[Answer end]";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryStyle {
    #[default]
    FirstSentence,
    Echo,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookaheadRule {
    /// Matched as a substring of the tentative idea.
    pub contains: String,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MockScript {
    /// Candidate texts per round. Later rounds reuse the last entry.
    pub candidates: Vec<Vec<String>>,
    pub summary: SummaryStyle,
    pub lookahead: Vec<LookaheadRule>,
    pub default_lookahead: Vec<String>,
    /// Texts for the final response. Empty means the next round's candidates.
    pub final_texts: Vec<String>,
    /// Number of leading calls that fail with a retryable error.
    pub transient_failures: u32,
}

impl MockScript {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| MeIcpoError::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// Plays back a [`MockScript`] and records every request it receives.
#[derive(Debug)]
pub struct ScriptedGenerator {
    script: MockScript,
    candidate_calls: AtomicUsize,
    failures_left: AtomicU32,
    log: Mutex<Vec<GeneratorRequest>>,
}

impl ScriptedGenerator {
    pub fn new(script: MockScript) -> Self {
        let failures = script.transient_failures;
        Self {
            script,
            candidate_calls: AtomicUsize::new(0),
            failures_left: AtomicU32::new(failures),
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn calls(&self) -> Vec<GeneratorRequest> {
        self.log.lock().expect("mock log poisoned").clone()
    }

    pub fn call_count(&self, purpose: Purpose) -> usize {
        self.log
            .lock()
            .expect("mock log poisoned")
            .iter()
            .filter(|r| r.purpose == purpose)
            .count()
    }

    fn round_texts(&self, round: usize) -> &[String] {
        match self.script.candidates.len() {
            0 => &[],
            n => &self.script.candidates[round.min(n - 1)],
        }
    }

    fn lookahead_texts(&self, tentative: Option<&str>) -> &[String] {
        if let Some(t) = tentative {
            if let Some(rule) = self
                .script
                .lookahead
                .iter()
                .find(|r| t.contains(&r.contains))
            {
                return &rule.texts;
            }
        }
        &self.script.default_lookahead
    }
}

fn cycle(texts: &[String], n: usize) -> Vec<String> {
    (0..n)
        .map(|j| {
            if texts.is_empty() {
                String::new()
            } else {
                texts[j % texts.len()].clone()
            }
        })
        .collect()
}

/// The text between the answer markers of a summarization prompt.
pub fn answer_block(prompt: &str) -> &str {
    let Some(start) = prompt.find(ANSWER_START) else {
        return prompt;
    };
    let body = &prompt[start + ANSWER_START.len()..];
    match body.rfind(ANSWER_END) {
        Some(end) => &body[..end],
        None => body,
    }
}

/// Text up to and including the first `.`, `!` or `?` that ends a sentence.
pub fn first_sentence(text: &str) -> &str {
    let text = text.trim();
    let mut chars = text.char_indices().peekable();
    while let Some((i, ch)) = chars.next() {
        if matches!(ch, '.' | '!' | '?') {
            match chars.peek() {
                None => return text,
                Some((_, next)) if next.is_whitespace() => return &text[..i + ch.len_utf8()],
                _ => {}
            }
        }
    }
    text
}

impl Generator for ScriptedGenerator {
    fn generate(
        &self,
        request: &GeneratorRequest,
    ) -> std::result::Result<GeneratorResponse, GenerateFailure> {
        self.log
            .lock()
            .expect("mock log poisoned")
            .push(request.clone());
        let failed = self
            .failures_left
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            return Err(GenerateFailure::retryable("scripted transient failure"));
        }
        let n = request.samples;
        let texts = match request.purpose {
            Purpose::Candidate => {
                let round = self.candidate_calls.fetch_add(1, Ordering::SeqCst);
                cycle(self.round_texts(round), n)
            }
            Purpose::Summary => {
                let prompt = request
                    .messages
                    .last()
                    .map(|m| m.content.as_str())
                    .unwrap_or("");
                let block = answer_block(prompt);
                let text = match self.script.summary {
                    SummaryStyle::FirstSentence => first_sentence(block),
                    SummaryStyle::Echo => block,
                };
                vec![text.to_string(); n]
            }
            Purpose::Lookahead => cycle(self.lookahead_texts(request.tentative.as_deref()), n),
            Purpose::Final => {
                if self.script.final_texts.is_empty() {
                    cycle(
                        self.round_texts(self.candidate_calls.load(Ordering::SeqCst)),
                        n,
                    )
                } else {
                    cycle(&self.script.final_texts, n)
                }
            }
        };
        let usage = Usage {
            prompt_tokens: request
                .messages
                .iter()
                .map(|m| count_tokens(&m.content) as u64)
                .sum(),
            completion_tokens: texts.iter().map(|t| count_tokens(t) as u64).sum(),
        };
        Ok(GeneratorResponse { texts, usage })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentence_boundaries() {
        assert_eq!(
            first_sentence("We solved it. Then boxed{204.0}."),
            "We solved it."
        );
        assert_eq!(
            first_sentence("The value is 204.0 minutes"),
            "The value is 204.0 minutes"
        );
        assert_eq!(first_sentence("  Done!"), "Done!");
        assert_eq!(first_sentence(""), "");
    }

    #[test]
    fn answer_block_extraction() {
        let p = "head\n[Answer start]\nbody text\n[Answer end]\n\nSummary:";
        assert_eq!(answer_block(p), "body text");
        assert_eq!(answer_block("[Answer start]\n\n[Answer end]"), "");
    }

    #[test]
    fn cycling_fills_samples() {
        let t = vec!["a".to_string(), "b".to_string()];
        assert_eq!(cycle(&t, 3), vec!["a", "b", "a"]);
        assert_eq!(cycle(&[], 2), vec!["", ""]);
    }
}
