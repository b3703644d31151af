//! OpenAI-style chat-completion client over blocking HTTP.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::generator::{
    GenerateFailure, Generator, GeneratorRequest, GeneratorResponse, Role, Usage,
};

pub const DEFAULT_API_KEY_ENV: &str = "ICPO_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HttpSettings {
    /// Full URL of the chat-completions route.
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Deserialize)]
struct CompletionBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<UsageBody>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    #[serde(default)]
    message: Option<ChoiceMessage>,
    #[serde(default)]
    text: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize)]
struct UsageBody {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

pub struct HttpGenerator {
    settings: HttpSettings,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpGenerator {
    /// Reads the bearer token from the configured environment variable. A
    /// missing variable means requests are sent without authorization.
    pub fn new(settings: HttpSettings) -> Self {
        let api_key = std::env::var(&settings.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Self::with_key(settings, api_key)
    }

    pub fn with_key(settings: HttpSettings, api_key: Option<String>) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(settings.timeout_secs)))
            .http_status_as_error(false)
            .build();
        Self {
            settings,
            api_key,
            agent: config.into(),
        }
    }

    pub fn settings(&self) -> &HttpSettings {
        &self.settings
    }

    pub fn request_body(&self, request: &GeneratorRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "n": request.samples,
        })
    }
}

fn classify(err: ureq::Error) -> GenerateFailure {
    let retryable = matches!(
        err,
        ureq::Error::Io(_)
            | ureq::Error::Timeout(_)
            | ureq::Error::HostNotFound
            | ureq::Error::ConnectionFailed
            | ureq::Error::Protocol(_)
    );
    GenerateFailure {
        message: format!("transport error: {err}"),
        retryable,
    }
}

fn parse_body(body: CompletionBody) -> Result<GeneratorResponse, GenerateFailure> {
    let mut choices = body.choices;
    choices.sort_by_key(|c| c.index.unwrap_or(usize::MAX));
    let texts = choices
        .into_iter()
        .map(|c| {
            c.message
                .and_then(|m| m.content)
                .or(c.text)
                .ok_or_else(|| GenerateFailure::fatal("choice carries no text"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let usage = body
        .usage
        .map(|u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        })
        .unwrap_or_default();
    Ok(GeneratorResponse { texts, usage })
}

impl Generator for HttpGenerator {
    fn generate(&self, request: &GeneratorRequest) -> Result<GeneratorResponse, GenerateFailure> {
        let mut call = self
            .agent
            .post(&self.settings.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", format!("Bearer {key}"));
        }
        let mut response = call
            .send_json(self.request_body(request))
            .map_err(classify)?;
        let status = response.status().as_u16();
        if !(200..300).contains(&status) {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            let detail: String = detail.chars().take(200).collect();
            let message = format!("status {status}: {detail}");
            return Err(GenerateFailure {
                message,
                retryable: status == 429 || status >= 500,
            });
        }
        let body: CompletionBody = response
            .body_mut()
            .read_json()
            .map_err(|e| GenerateFailure::fatal(format!("unreadable response body: {e}")))?;
        parse_body(body)
    }
}
