//! Chooses between the rewritten and the extended response by their
//! sentence-level GLEU against the prototype, and records the decision.

use crate::corpus::Polarity;
use crate::eval::{clipped_matches, ngram_counts};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const TRACE_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SelectError {
    #[error("GLEU needs a non-empty {0}")]
    Empty(&'static str),
    #[error("unknown candidate source `{0}` (expected rewrite or add)")]
    Source(String),
}

/// `min(precision, recall)` over all n-grams with n = 1..=max_n pooled, matches
/// clipped by reference counts.
pub fn gleu(hypothesis: &[String], reference: &[String], max_n: usize) -> Result<f64, SelectError> {
    if hypothesis.is_empty() {
        return Err(SelectError::Empty("hypothesis"));
    }
    if reference.is_empty() {
        return Err(SelectError::Empty("reference"));
    }
    let (mut matched, mut hyp_total, mut ref_total) = (0usize, 0usize, 0usize);
    for n in 1..=max_n {
        matched += clipped_matches(&ngram_counts(hypothesis, n), &ngram_counts(reference, n));
        hyp_total += hypothesis.len().saturating_sub(n - 1);
        ref_total += reference.len().saturating_sub(n - 1);
    }
    let precision = matched as f64 / hyp_total as f64;
    let recall = matched as f64 / ref_total as f64;
    Ok(precision.min(recall))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    #[default]
    Rewrite,
    Add,
}

impl fmt::Display for CandidateSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CandidateSource::Rewrite => "rewrite",
            CandidateSource::Add => "add",
        })
    }
}

impl FromStr for CandidateSource {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rewrite" => Ok(CandidateSource::Rewrite),
            "add" => Ok(CandidateSource::Add),
            other => Err(SelectError::Source(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResponse {
    pub tokens: Vec<String>,
    pub source: CandidateSource,
    pub gleu_vs_prototype: f64,
}

impl CandidateResponse {
    pub fn score(tokens: Vec<String>, source: CandidateSource, prototype: &[String]) -> Result<Self, SelectError> {
        let gleu_vs_prototype = gleu(&tokens, prototype, 4)?;
        Ok(Self { tokens, source, gleu_vs_prototype })
    }
}

/// Strictly higher GLEU wins; equal scores go to `tie`.
pub fn select(rewrite: &CandidateResponse, add: &CandidateResponse, tie: CandidateSource) -> CandidateSource {
    if rewrite.gleu_vs_prototype > add.gleu_vs_prototype {
        CandidateSource::Rewrite
    } else if add.gleu_vs_prototype > rewrite.gleu_vs_prototype {
        CandidateSource::Add
    } else {
        tie
    }
}

/// Everything that went into one response, serialized one record per response.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResponseTrace {
    #[serde(rename = "v")]
    pub version: u32,
    pub context: Vec<String>,
    pub emotion_states: Vec<String>,
    pub target: Polarity,
    pub prototype: Vec<String>,
    pub rewrite: Option<CandidateResponse>,
    pub add: Option<CandidateResponse>,
    pub selected: CandidateSource,
    pub response: Vec<String>,
    pub response_text: String,
    /// Tokens the rewrite branch deleted from the prototype.
    pub deleted: Vec<String>,
    /// Fallbacks and other non-fatal events, in order.
    pub notes: Vec<String>,
}

impl ResponseTrace {
    pub fn selected_candidate(&self) -> Option<&CandidateResponse> {
        match self.selected {
            CandidateSource::Rewrite => self.rewrite.as_ref(),
            CandidateSource::Add => self.add.as_ref(),
        }
    }

    /// The final response must be the selected candidate's tokens.
    pub fn is_consistent(&self) -> bool {
        self.selected_candidate().is_some_and(|c| c.tokens == self.response && c.source == self.selected)
    }
}
