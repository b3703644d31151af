//! Mean@k, single-attempt accuracy and Maj@k over a question set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::answer::{canonicalize, AnswerMode};
use crate::error::{MeIcpoError, Result};
use crate::generator::Accounting;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub gold: String,
    /// The k sampled answers.
    pub samples: Vec<Option<String>>,
    /// The single answer the method returns.
    pub final_answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub sample_correct: Vec<bool>,
    pub final_correct: bool,
    pub majority_answer: Option<String>,
    pub majority_tied: bool,
    pub majority_correct: bool,
    /// Probability that the uniform tie-break lands on the gold answer.
    pub majority_expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_at_k: f64,
    pub accuracy: f64,
    pub maj_at_k: f64,
    pub maj_at_k_expected: f64,
    pub tie_seed: u64,
    pub questions: Vec<QuestionMetrics>,
    pub accounting: Accounting,
}

fn key(answer: &str, mode: AnswerMode) -> String {
    canonicalize(answer, mode).unwrap_or_else(|| answer.trim().to_string())
}

fn is_correct(answer: Option<&str>, gold: &str, mode: AnswerMode) -> bool {
    answer
        .and_then(|a| canonicalize(a, mode))
        .is_some_and(|a| a == key(gold, mode))
}

/// Scores every question. Maj@k ties are broken uniformly with a generator
/// seeded by `tie_seed` on a stream per question index.
pub fn compute_metrics(
    outcomes: &[QuestionOutcome],
    mode: AnswerMode,
    tie_seed: u64,
) -> Result<RunMetrics> {
    if outcomes.is_empty() {
        return Err(MeIcpoError::Metrics("no questions".into()));
    }
    let mut questions = Vec::with_capacity(outcomes.len());
    for (q, o) in outcomes.iter().enumerate() {
        if o.samples.is_empty() {
            return Err(MeIcpoError::Metrics(format!("question {q} has no samples")));
        }
        let sample_correct: Vec<bool> = o
            .samples
            .iter()
            .map(|a| is_correct(a.as_deref(), &o.gold, mode))
            .collect();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for c in o
            .samples
            .iter()
            .flatten()
            .filter_map(|a| canonicalize(a, mode))
        {
            *counts.entry(c).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        let winners: Vec<&String> = counts
            .iter()
            .filter(|(_, &n)| n == best && n > 0)
            .map(|(c, _)| c)
            .collect();
        let gold = key(&o.gold, mode);
        let (majority_answer, majority_expected) = if winners.is_empty() {
            (None, 0.0)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(tie_seed);
            rng.set_stream(q as u64);
            let pick = if winners.len() == 1 {
                0
            } else {
                rng.random_range(0..winners.len())
            };
            let hits = winners.iter().filter(|w| ***w == gold).count();
            (
                Some(winners[pick].clone()),
                hits as f64 / winners.len() as f64,
            )
        };
        questions.push(QuestionMetrics {
            final_correct: is_correct(o.final_answer.as_deref(), &o.gold, mode),
            majority_correct: majority_answer.as_deref() == Some(gold.as_str()),
            majority_tied: winners.len() > 1,
            majority_answer,
            majority_expected,
            sample_correct,
        });
    }
    let n = questions.len() as f64;
    let mean = |f: &dyn Fn(&QuestionMetrics) -> f64| questions.iter().map(f).sum::<f64>() / n;
    Ok(RunMetrics {
        mean_at_k: mean(&|q| {
            q.sample_correct.iter().filter(|&&c| c).count() as f64 / q.sample_correct.len() as f64
        }),
        accuracy: mean(&|q| f64::from(u8::from(q.final_correct))),
        maj_at_k: mean(&|q| f64::from(u8::from(q.majority_correct))),
        maj_at_k_expected: mean(&|q| q.majority_expected),
        tie_seed,
        questions,
        accounting: Accounting::default(),
    })
}
