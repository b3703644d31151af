//! JSON-lines trace with one record per round per candidate.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::algorithm::{candidate_tokens, MeIcpoRun};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub round: usize,
    pub candidate: usize,
    pub skipped: bool,
    pub text_sha256: String,
    pub answer: Option<String>,
    pub reward: u8,
    pub entropy: Option<f64>,
    pub selected: bool,
    pub candidate_tokens: usize,
    pub summary_tokens: u64,
    pub lookahead_tokens: u64,
}

pub fn trace_records(run: &MeIcpoRun) -> Vec<TraceRecord> {
    run.rounds
        .iter()
        .flat_map(|r| {
            r.candidates.iter().map(move |c| TraceRecord {
                round: r.round,
                candidate: c.index,
                skipped: r.skipped,
                text_sha256: c.text_sha256.clone(),
                answer: c.answer.clone(),
                reward: c.reward,
                entropy: c.entropy,
                selected: r.selected == Some(c.index),
                candidate_tokens: candidate_tokens(c),
                summary_tokens: c.summary_usage.prompt_tokens + c.summary_usage.completion_tokens,
                lookahead_tokens: c.lookahead_usage.prompt_tokens
                    + c.lookahead_usage.completion_tokens,
            })
        })
        .collect()
}

pub fn write_trace<W: Write>(run: &MeIcpoRun, mut out: W) -> Result<()> {
    for record in trace_records(run) {
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
