//! Shipped prompt templates and rendering of the in-context history.

use serde::{Deserialize, Serialize};

use crate::answer::AnswerMode;
use crate::generator::Message;

const SYSTEM_NUMERIC: &str = include_str!("../prompts/system_numeric.txt");
const SYSTEM_LETTER: &str = include_str!("../prompts/system_letter.txt");
const SYSTEM_FREEFORM: &str = include_str!("../prompts/system_freeform.txt");
const SUMMARY_NUMERIC: &str = include_str!("../prompts/summary_numeric.txt");
const SUMMARY_LETTER: &str = include_str!("../prompts/summary_letter.txt");
const SUMMARY_FREEFORM: &str = include_str!("../prompts/summary_freeform.txt");

pub const ANSWER_PLACEHOLDER: &str = "{answer}";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub system: String,
    pub summary: String,
}

impl PromptSet {
    pub fn for_mode(mode: AnswerMode) -> Self {
        let (system, summary) = match mode {
            AnswerMode::Numeric => (SYSTEM_NUMERIC, SUMMARY_NUMERIC),
            AnswerMode::Letter => (SYSTEM_LETTER, SUMMARY_LETTER),
            AnswerMode::Freeform => (SYSTEM_FREEFORM, SUMMARY_FREEFORM),
        };
        Self {
            system: system.trim_end().to_string(),
            summary: summary.trim_end().to_string(),
        }
    }

    /// The summarization prompt wrapped around one full response.
    pub fn summary_prompt(&self, answer: &str) -> String {
        self.summary.replacen(ANSWER_PLACEHOLDER, answer, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Idea {
    pub summary: String,
    pub reward: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcpoHistory {
    pub system_prompt: String,
    pub question: String,
    pub ideas: Vec<Idea>,
}

impl IcpoHistory {
    pub fn new(system_prompt: impl Into<String>, question: impl Into<String>) -> Self {
        Self {
            system_prompt: system_prompt.into(),
            question: question.into(),
            ideas: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ideas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ideas.is_empty()
    }

    pub fn with_idea(&self, idea: Idea) -> Self {
        let mut next = self.clone();
        next.ideas.push(idea);
        next
    }

    /// The user turn: the question followed by the ideas. With reward tags the
    /// ideas are grouped into reward-0 and reward-1 lists, otherwise listed in
    /// commit order without rewards.
    pub fn render_user(&self, reward_tags: bool) -> String {
        let mut out = self.question.trim_end().to_string();
        let mut section = |title: &str, ideas: Vec<&Idea>| {
            if ideas.is_empty() {
                return;
            }
            out.push_str("\n\n");
            out.push_str(title);
            for (i, idea) in ideas.iter().enumerate() {
                out.push_str(&format!("\n\n[{i}]- {}", idea.summary.trim()));
            }
        };
        if reward_tags {
            section(
                "bad ideas (reward 0):",
                self.ideas.iter().filter(|i| i.reward == 0).collect(),
            );
            section(
                "good ideas (reward 1):",
                self.ideas.iter().filter(|i| i.reward != 0).collect(),
            );
        } else {
            section("ideas:", self.ideas.iter().collect());
        }
        out
    }

    pub fn messages(&self, reward_tags: bool) -> Vec<Message> {
        vec![
            Message::system(self.system_prompt.clone()),
            Message::user(self.render_user(reward_tags)),
        ]
    }
}
