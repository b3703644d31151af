//! Majority-vote self-rewards and the empirical answer entropy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::answer::{canonicalize, AnswerMode};
use crate::error::{MeIcpoError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    /// First raw answer belonging to the winning class.
    pub mode: String,
    pub canonical: String,
    pub rewards: Vec<u8>,
    pub tie: bool,
    pub counts: BTreeMap<String, usize>,
}

/// Rewards 1 for every answer whose canonical form equals the most frequent one.
/// Ties go to the lexicographically smallest canonical answer.
pub fn majority_vote(answers: &[Option<String>], mode: AnswerMode) -> Result<Vote> {
    let canon: Vec<Option<String>> = answers
        .iter()
        .map(|a| a.as_deref().and_then(|a| canonicalize(a, mode)))
        .collect();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for c in canon.iter().flatten() {
        *counts.entry(c.clone()).or_default() += 1;
    }
    let best = *counts.values().max().ok_or(MeIcpoError::NoConsensus {
        candidates: answers.len(),
    })?;
    let winners: Vec<&String> = counts
        .iter()
        .filter(|(_, &n)| n == best)
        .map(|(c, _)| c)
        .collect();
    let canonical = winners[0].clone();
    let rewards: Vec<u8> = canon
        .iter()
        .map(|c| u8::from(c.as_deref() == Some(canonical.as_str())))
        .collect();
    let first = rewards.iter().position(|&r| r == 1).expect("winner occurs");
    let mode_raw = answers[first]
        .as_deref()
        .expect("winner is present")
        .trim()
        .to_string();
    Ok(Vote {
        mode: mode_raw,
        canonical,
        rewards,
        tie: winners.len() > 1,
        counts,
    })
}

/// Shannon entropy in nats of the empirical answer distribution. Absent or
/// invalid answers share a single bucket.
pub fn answer_entropy(answers: &[Option<String>], mode: AnswerMode) -> f64 {
    if answers.is_empty() {
        return 0.0;
    }
    let mut buckets: BTreeMap<Option<String>, usize> = BTreeMap::new();
    for a in answers {
        *buckets
            .entry(a.as_deref().and_then(|a| canonicalize(a, mode)))
            .or_default() += 1;
    }
    let total = answers.len() as f64;
    let h: f64 = buckets
        .values()
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum();
    h.max(0.0)
}
