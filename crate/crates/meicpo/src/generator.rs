//! The text generator interface and its retry wrapper.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{MeIcpoError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

/// What a request is for. Local only, never sent over the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Candidate,
    Summary,
    Lookahead,
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub samples: usize,
    pub purpose: Purpose,
    /// The tentative idea under evaluation for lookahead requests.
    pub tentative: Option<String>,
}

impl GeneratorRequest {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(MeIcpoError::InvalidRequest(
                "sample count must be at least 1".into(),
            ));
        }
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(MeIcpoError::InvalidRequest(format!(
                "temperature must be finite and non-negative, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(MeIcpoError::InvalidRequest(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(MeIcpoError::InvalidRequest(
                "max_tokens must be positive".into(),
            ));
        }
        if self.messages.is_empty() {
            return Err(MeIcpoError::InvalidRequest("message list is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// Calls made and tokens reported across a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Accounting {
    pub fn record(&mut self, usage: Usage) {
        self.calls += 1;
        self.prompt_tokens += usage.prompt_tokens;
        self.completion_tokens += usage.completion_tokens;
    }

    pub fn merge(&mut self, other: &Accounting) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorResponse {
    pub texts: Vec<String>,
    pub usage: Usage,
}

/// A failure from one generation attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateFailure {
    pub message: String,
    pub retryable: bool,
}

impl GenerateFailure {
    pub fn retryable(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }
}

pub trait Generator: Send + Sync {
    /// Makes one attempt at the request.
    fn generate(
        &self,
        request: &GeneratorRequest,
    ) -> std::result::Result<GeneratorResponse, GenerateFailure>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8000,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    /// Exponential backoff delay before retry `attempt` (1-based).
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64
            .checked_shl(attempt.saturating_sub(1))
            .unwrap_or(u64::MAX);
        Duration::from_millis(
            self.base_delay_ms
                .saturating_mul(factor)
                .min(self.max_delay_ms),
        )
    }
}

/// Validates the request, calls the generator and retries retryable failures.
/// The response must carry exactly `samples` texts.
pub fn generate_with_retry(
    generator: &dyn Generator,
    request: &GeneratorRequest,
    policy: &RetryPolicy,
) -> Result<GeneratorResponse> {
    request.validate()?;
    let mut attempt = 0u32;
    loop {
        attempt += 1;
        match generator.generate(request) {
            Ok(response) => {
                if response.texts.len() != request.samples {
                    return Err(MeIcpoError::Response(format!(
                        "expected {} text(s), got {}",
                        request.samples,
                        response.texts.len()
                    )));
                }
                return Ok(response);
            }
            Err(failure) if failure.retryable && attempt <= policy.max_retries => {
                thread::sleep(policy.delay(attempt));
            }
            Err(failure) => {
                return Err(MeIcpoError::Generator {
                    attempts: attempt,
                    message: failure.message,
                });
            }
        }
    }
}

/// Counts whitespace-separated tokens.
pub fn count_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `cap` whitespace-separated tokens, joined by single spaces.
/// Returns the text unchanged when it is within the cap.
pub fn truncate_tokens(text: &str, cap: usize) -> (String, bool) {
    if count_tokens(text) <= cap {
        return (text.to_string(), false);
    }
    let kept: Vec<&str> = text.split_whitespace().take(cap).collect();
    (kept.join(" "), true)
}
