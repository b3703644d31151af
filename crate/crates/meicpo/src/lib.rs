//! Minimum-entropy in-context policy optimization for a text generator.
//!
//! The loop talks to models only through [`Generator`]. [`ScriptedGenerator`]
//! plays back a fixed script and [`HttpGenerator`] speaks the common
//! chat-completion JSON protocol.

pub mod algorithm;
pub mod answer;
pub mod error;
pub mod generator;
pub mod http;
pub mod metrics;
pub mod mock;
pub mod prompts;
pub mod trace;
pub mod vote;

pub use algorithm::{
    estimate_entropy, run_me_icpo, summarize, Candidate, EntropyEstimate, MeIcpoConfig, MeIcpoRun,
    RoundRecord, Selection, Summary,
};
pub use answer::{canonicalize, extract_answer, AnswerMode};
pub use error::{MeIcpoError, Result};
pub use generator::{
    generate_with_retry, Accounting, GenerateFailure, Generator, GeneratorRequest,
    GeneratorResponse, Message, Purpose, RetryPolicy, Role, Usage,
};
pub use http::{HttpGenerator, HttpSettings};
pub use metrics::{compute_metrics, QuestionMetrics, QuestionOutcome, RunMetrics};
pub use mock::{LookaheadRule, MockScript, ScriptedGenerator, SummaryStyle};
pub use prompts::{IcpoHistory, Idea, PromptSet};
pub use trace::{trace_records, write_trace, TraceRecord};
pub use vote::{answer_entropy, majority_vote, Vote};
