//! The minimum-entropy optimization loop.
//!
//! Each round samples `k` candidates from the current history, rewards them
//! by majority vote, summarizes each one, scores every tentative history by
//! the entropy of its lookahead answers and commits the argmin. Requests are
//! issued one at a time, so a run against the scripted generator is a pure
//! function of its inputs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::answer::{extract_answer, AnswerMode};
use crate::error::{MeIcpoError, Result};
use crate::generator::{
    count_tokens, generate_with_retry, truncate_tokens, Accounting, Generator, GeneratorRequest,
    Message, Purpose, RetryPolicy, Usage,
};
use crate::prompts::{IcpoHistory, Idea, PromptSet};
use crate::vote::{answer_entropy, majority_vote, Vote};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    MinEntropy,
    /// Commit the first reward-1 candidate without lookahead.
    RewardGreedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeIcpoConfig {
    pub rounds: usize,
    pub candidates: usize,
    pub lookahead_samples: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub lookahead_temperature: f64,
    pub candidate_max_tokens: u32,
    pub lookahead_max_tokens: u32,
    pub summary_max_tokens: u32,
    /// `None` draws one greedy final response; `Some(k)` votes over k samples.
    pub final_vote: Option<usize>,
    pub mode: AnswerMode,
    pub reward_tags: bool,
    pub selection: Selection,
    pub retry: RetryPolicy,
}

impl Default for MeIcpoConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            candidates: 16,
            lookahead_samples: 16,
            temperature: 0.6,
            top_p: 0.95,
            lookahead_temperature: 0.6,
            candidate_max_tokens: 4096,
            lookahead_max_tokens: 1024,
            summary_max_tokens: 500,
            final_vote: None,
            mode: AnswerMode::Numeric,
            reward_tags: true,
            selection: Selection::MinEntropy,
            retry: RetryPolicy::default(),
        }
    }
}

impl MeIcpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MeIcpoError::InvalidConfig(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.candidates == 0 {
            return bad("candidates must be at least 1".into());
        }
        if self.lookahead_samples == 0 {
            return bad("lookahead_samples must be at least 1".into());
        }
        if self.final_vote == Some(0) {
            return bad("final_vote must be at least 1 when set".into());
        }
        for (name, t) in [
            ("temperature", self.temperature),
            ("lookahead_temperature", self.lookahead_temperature),
        ] {
            if !(t.is_finite() && t >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {t}"));
            }
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return bad(format!("top_p must lie in (0, 1], got {}", self.top_p));
        }
        if self.candidate_max_tokens == 0
            || self.lookahead_max_tokens == 0
            || self.summary_max_tokens == 0
        {
            return bad("token limits must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub text: String,
    pub truncated: bool,
    pub usage: Usage,
}

/// Greedy summary of one response, capped at `cap` whitespace tokens.
pub fn summarize(
    text: &str,
    generator: &dyn Generator,
    prompts: &PromptSet,
    cap: u32,
    retry: &RetryPolicy,
) -> Result<Summary> {
    let request = GeneratorRequest {
        messages: vec![Message::user(prompts.summary_prompt(text))],
        temperature: 0.0,
        top_p: 1.0,
        max_tokens: cap,
        samples: 1,
        purpose: Purpose::Summary,
        tentative: None,
    };
    let response = generate_with_retry(generator, &request, retry)?;
    let (text, truncated) = truncate_tokens(&response.texts[0], cap as usize);
    Ok(Summary {
        text,
        truncated,
        usage: response.usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub nats: f64,
    pub answers: Vec<Option<String>>,
    pub usage: Usage,
}

/// Entropy of the answers drawn from `m` lookahead samples conditioned on
/// `history`. The newest idea is passed along as the tentative one.
pub fn estimate_entropy(
    history: &IcpoHistory,
    generator: &dyn Generator,
    cfg: &MeIcpoConfig,
) -> Result<EntropyEstimate> {
    let request = GeneratorRequest {
        messages: history.messages(cfg.reward_tags),
        temperature: cfg.lookahead_temperature,
        top_p: cfg.top_p,
        max_tokens: cfg.lookahead_max_tokens,
        samples: cfg.lookahead_samples,
        purpose: Purpose::Lookahead,
        tentative: history.ideas.last().map(|i| i.summary.clone()),
    };
    let response = generate_with_retry(generator, &request, &cfg.retry)?;
    let answers: Vec<Option<String>> = response
        .texts
        .iter()
        .map(|t| extract_answer(t, cfg.mode))
        .collect();
    Ok(EntropyEstimate {
        nats: answer_entropy(&answers, cfg.mode),
        answers,
        usage: response.usage,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub index: usize,
    pub text: String,
    pub text_sha256: String,
    pub answer: Option<String>,
    pub reward: u8,
    pub summary: String,
    pub summary_truncated: bool,
    pub summary_usage: Usage,
    pub entropy: Option<f64>,
    pub lookahead_answers: Vec<Option<String>>,
    pub lookahead_usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub skipped: bool,
    pub vote: Option<Vote>,
    pub candidates: Vec<Candidate>,
    pub selected: Option<usize>,
    pub candidate_usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeIcpoRun {
    pub config: MeIcpoConfig,
    pub history: IcpoHistory,
    pub rounds: Vec<RoundRecord>,
    pub final_texts: Vec<String>,
    pub final_answers: Vec<Option<String>>,
    pub final_vote: Option<Vote>,
    pub final_answer: Option<String>,
    pub accounting: Accounting,
}

impl MeIcpoRun {
    pub fn skipped_rounds(&self) -> usize {
        self.rounds.iter().filter(|r| r.skipped).count()
    }
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Index of the smallest entropy, ties to the lowest index.
pub fn argmin_entropy(entropies: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &h) in entropies.iter().enumerate() {
        if best.is_none_or(|b| h < entropies[b]) {
            best = Some(j);
        }
    }
    best
}

fn select(candidates: &[Candidate], selection: Selection) -> usize {
    match selection {
        Selection::MinEntropy => {
            let h: Vec<f64> = candidates
                .iter()
                .map(|c| c.entropy.unwrap_or(f64::INFINITY))
                .collect();
            argmin_entropy(&h).expect("at least one candidate")
        }
        Selection::RewardGreedy => candidates.iter().position(|c| c.reward == 1).unwrap_or(0),
    }
}

pub fn run_me_icpo(
    question: &str,
    cfg: &MeIcpoConfig,
    generator: &dyn Generator,
) -> Result<MeIcpoRun> {
    cfg.validate()?;
    let prompts = PromptSet::for_mode(cfg.mode);
    let mut history = IcpoHistory::new(prompts.system.clone(), question);
    let mut accounting = Accounting::default();
    let mut rounds = Vec::with_capacity(cfg.rounds);

    for round in 1..=cfg.rounds {
        let request = GeneratorRequest {
            messages: history.messages(cfg.reward_tags),
            temperature: cfg.temperature,
            top_p: cfg.top_p,
            max_tokens: cfg.candidate_max_tokens,
            samples: cfg.candidates,
            purpose: Purpose::Candidate,
            tentative: None,
        };
        let response = generate_with_retry(generator, &request, &cfg.retry)?;
        accounting.record(response.usage);
        let answers: Vec<Option<String>> = response
            .texts
            .iter()
            .map(|t| extract_answer(t, cfg.mode))
            .collect();

        let vote = match majority_vote(&answers, cfg.mode) {
            Ok(v) => v,
            Err(MeIcpoError::NoConsensus { .. }) => {
                let candidates = response
                    .texts
                    .iter()
                    .enumerate()
                    .map(|(j, text)| Candidate {
                        index: j,
                        text: text.clone(),
                        text_sha256: sha256_hex(text),
                        answer: None,
                        reward: 0,
                        summary: String::new(),
                        summary_truncated: false,
                        summary_usage: Usage::default(),
                        entropy: None,
                        lookahead_answers: Vec::new(),
                        lookahead_usage: Usage::default(),
                    })
                    .collect();
                rounds.push(RoundRecord {
                    round,
                    skipped: true,
                    vote: None,
                    candidates,
                    selected: None,
                    candidate_usage: response.usage,
                });
                continue;
            }
            Err(e) => return Err(e),
        };

        let mut candidates = Vec::with_capacity(cfg.candidates);
        for (j, text) in response.texts.iter().enumerate() {
            let summary = summarize(
                text,
                generator,
                &prompts,
                cfg.summary_max_tokens,
                &cfg.retry,
            )?;
            accounting.record(summary.usage);
            candidates.push(Candidate {
                index: j,
                text: text.clone(),
                text_sha256: sha256_hex(text),
                answer: answers[j].clone(),
                reward: vote.rewards[j],
                summary: summary.text,
                summary_truncated: summary.truncated,
                summary_usage: summary.usage,
                entropy: None,
                lookahead_answers: Vec::new(),
                lookahead_usage: Usage::default(),
            });
        }

        if cfg.selection == Selection::MinEntropy {
            for c in candidates.iter_mut() {
                let tentative = history.with_idea(Idea {
                    summary: c.summary.clone(),
                    reward: c.reward,
                });
                let estimate = estimate_entropy(&tentative, generator, cfg)?;
                accounting.record(estimate.usage);
                c.entropy = Some(estimate.nats);
                c.lookahead_answers = estimate.answers;
                c.lookahead_usage = estimate.usage;
            }
        }

        let chosen = select(&candidates, cfg.selection);
        history.ideas.push(Idea {
            summary: candidates[chosen].summary.clone(),
            reward: candidates[chosen].reward,
        });
        rounds.push(RoundRecord {
            round,
            skipped: false,
            vote: Some(vote),
            candidates,
            selected: Some(chosen),
            candidate_usage: response.usage,
        });
    }

    let (temperature, samples) = match cfg.final_vote {
        None => (0.0, 1),
        Some(k) => (cfg.temperature, k),
    };
    let request = GeneratorRequest {
        messages: history.messages(cfg.reward_tags),
        temperature,
        top_p: if cfg.final_vote.is_some() {
            cfg.top_p
        } else {
            1.0
        },
        max_tokens: cfg.candidate_max_tokens,
        samples,
        purpose: Purpose::Final,
        tentative: None,
    };
    let response = generate_with_retry(generator, &request, &cfg.retry)?;
    accounting.record(response.usage);
    let final_answers: Vec<Option<String>> = response
        .texts
        .iter()
        .map(|t| extract_answer(t, cfg.mode))
        .collect();
    let (final_vote, final_answer) = match cfg.final_vote {
        None => (None, final_answers[0].clone()),
        Some(_) => match majority_vote(&final_answers, cfg.mode) {
            Ok(v) => {
                let mode = v.mode.clone();
                (Some(v), Some(mode))
            }
            Err(MeIcpoError::NoConsensus { .. }) => (None, None),
            Err(e) => return Err(e),
        },
    };

    Ok(MeIcpoRun {
        config: cfg.clone(),
        history,
        rounds,
        final_texts: response.texts,
        final_answers,
        final_vote,
        final_answer,
        accounting,
    })
}

/// Local whitespace token count of a candidate's full text.
pub fn candidate_tokens(c: &Candidate) -> usize {
    count_tokens(&c.text)
}
