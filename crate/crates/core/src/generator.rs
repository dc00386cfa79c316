//! Prototype response generation: context splicing, top-k then nucleus
//! filtering, seeded autoregressive sampling and backward-likelihood (MMI)
//! reranking of several sampled candidates.

use crate::corpus::Dialogue;
use crate::lm::{LanguageModel, LmError};
use crate::text::{TokenId, Vocab};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("invalid decode configuration: {0}")]
    Config(String),
    #[error("generation precondition violated: {0}")]
    Precondition(String),
    #[error("backend failed at step {step}: {source}")]
    Backend { step: usize, source: LmError },
    #[error("cannot access MMI scorer {path}: {message}")]
    Scorer { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub top_k: usize,
    pub nucleus_p: f64,
    pub max_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Candidates sampled for MMI reranking.
    pub mmi_candidates: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { top_k: 100, nucleus_p: 0.7, max_tokens: 20, temperature: 1.0, seed: 0, mmi_candidates: 5 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if self.top_k == 0 {
            return Err(GenerationError::Config("top_k must be at least 1".into()));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(GenerationError::Config(format!("nucleus_p {} outside (0, 1]", self.nucleus_p)));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(GenerationError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if self.max_tokens == 0 || self.mmi_candidates == 0 {
            return Err(GenerationError::Config("max_tokens and mmi_candidates must be positive".into()));
        }
        Ok(())
    }
}

/// Utterances joined with the separator token after each one.
pub fn concat_context(context: &Dialogue, vocab: &Vocab) -> Vec<TokenId> {
    let mut out = Vec::new();
    for u in &context.utterances {
        out.extend(vocab.encode(&u.tokens));
        out.push(vocab.sep());
    }
    out
}

/// Whole dialogues spliced like a context, for training a response model.
pub fn dialogue_sequences(dialogues: &[Dialogue], vocab: &Vocab) -> Vec<Vec<TokenId>> {
    dialogues.iter().map(|d| concat_context(d, vocab)).collect()
}

/// Temperature, then the `top_k` highest logits (ties to the lower index),
/// then the smallest most-probable prefix of those whose mass reaches
/// `nucleus_p`; renormalized over the full vocabulary.
pub fn filter_logits(logits: &[f64], config: &DecodeConfig) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|l| l / config.temperature).collect();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| scaled[b].partial_cmp(&scaled[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    order.truncate(config.top_k.min(scaled.len()));
    let kept: Vec<f64> = order.iter().map(|&i| scaled[i]).collect();
    let probs = emodial_nn::softmax(&kept);
    let mut cumulative = 0.0;
    let mut support = 0;
    for p in &probs {
        cumulative += p;
        support += 1;
        if cumulative >= config.nucleus_p - 1e-12 {
            break;
        }
    }
    let mass: f64 = probs[..support].iter().sum();
    let mut out = vec![0.0; scaled.len()];
    for (&i, p) in order[..support].iter().zip(&probs) {
        out[i] = p / mass;
    }
    out
}

/// Inverse-CDF draw; never returns a zero-probability index.
pub fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen::<f64>();
    let mut cumulative = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        cumulative += p;
        last = i;
        if u < cumulative {
            return i;
        }
    }
    last
}

/// Tokens a response may never contain.
pub fn blocked_tokens(vocab: &Vocab) -> [TokenId; 3] {
    [vocab.pad(), vocab.unk(), vocab.cls()]
}

/// Masks blocked tokens (and the separator when `allow_end` is false).
pub fn mask_logits(logits: &mut [f64], vocab: &Vocab, allow_end: bool) {
    for t in blocked_tokens(vocab) {
        logits[t] = f64::NEG_INFINITY;
    }
    if !allow_end {
        logits[vocab.sep()] = f64::NEG_INFINITY;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeResponse {
    pub tokens: Vec<String>,
    /// Log-probability of each sampled token under the filtered distribution;
    /// one extra trailing entry for the end token when `terminated`.
    pub log_probs: Vec<f64>,
    pub terminated: bool,
    /// Every sampled candidate, in sampling order.
    #[serde(default)]
    pub candidates: Vec<Vec<String>>,
    /// Backward score of each candidate; empty when not reranked.
    #[serde(default)]
    pub mmi_scores: Vec<f64>,
}

/// Samples one response after the spliced context. The end token is not
/// allowed as the first token.
pub fn generate_prototype(
    context: &Dialogue,
    backend: &dyn LanguageModel,
    config: &DecodeConfig,
) -> Result<PrototypeResponse, GenerationError> {
    sample_with_seed(context, backend, config, config.seed)
}

fn sample_with_seed(
    context: &Dialogue,
    backend: &dyn LanguageModel,
    config: &DecodeConfig,
    seed: u64,
) -> Result<PrototypeResponse, GenerationError> {
    config.validate()?;
    if context.utterances.is_empty() {
        return Err(GenerationError::Precondition("context has no utterances".into()));
    }
    let vocab = backend.vocab();
    let mut ids = concat_context(context, vocab);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tokens = Vec::new();
    let mut log_probs = Vec::new();
    let mut terminated = false;
    for step in 0..config.max_tokens {
        let mut logits = backend.next_token_logits(&ids).map_err(|source| GenerationError::Backend { step, source })?;
        if logits.len() != vocab.len() || logits.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(GenerationError::Backend { step, source: LmError::Backend("logits malformed".into()) });
        }
        mask_logits(&mut logits, vocab, step > 0);
        let probs = filter_logits(&logits, config);
        let t = sample_index(&probs, &mut rng);
        log_probs.push(probs[t].ln());
        if t == vocab.sep() {
            terminated = true;
            break;
        }
        tokens.push(vocab.token(t).to_string());
        ids.push(t);
    }
    Ok(PrototypeResponse { candidates: vec![tokens.clone()], tokens, log_probs, terminated, mmi_scores: Vec::new() })
}

/// `count` candidates, candidate `i` sampled with seed `config.seed + i`.
pub fn generate_candidates(
    context: &Dialogue,
    backend: &dyn LanguageModel,
    config: &DecodeConfig,
    count: usize,
) -> Result<Vec<PrototypeResponse>, GenerationError> {
    (0..count as u64).map(|i| sample_with_seed(context, backend, config, config.seed.wrapping_add(i))).collect()
}

/// Replays a response through the backend and returns its log-probability
/// under the same filtered distributions used for sampling.
pub fn sequence_log_prob(
    context: &Dialogue,
    response: &PrototypeResponse,
    backend: &dyn LanguageModel,
    config: &DecodeConfig,
) -> Result<f64, GenerationError> {
    let vocab = backend.vocab();
    let mut ids = concat_context(context, vocab);
    let mut targets = vocab.encode(&response.tokens);
    if response.terminated {
        targets.push(vocab.sep());
    }
    let mut total = 0.0;
    for (step, &t) in targets.iter().enumerate() {
        let mut logits = backend.next_token_logits(&ids).map_err(|source| GenerationError::Backend { step, source })?;
        mask_logits(&mut logits, vocab, step > 0);
        total += filter_logits(&logits, config)[t].ln();
        ids.push(t);
    }
    Ok(total)
}

/// Length-normalized backward log-likelihood of a context given a response.
pub trait BackwardScorer {
    fn score(&self, context: &[String], response: &[String]) -> f64;
}

/// Laplace-smoothed table of `p(context token | response token)` estimated
/// from aligned (response, preceding context) pairs. The context likelihood
/// mixes uniformly over response tokens and is averaged per context token.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MmiScorer {
    pairs: HashMap<String, HashMap<String, f64>>,
    totals: HashMap<String, f64>,
    vocab_size: usize,
}

impl MmiScorer {
    pub fn train<'a>(examples: impl IntoIterator<Item = (&'a [String], &'a [String])>, vocab_size: usize) -> Self {
        let mut scorer = Self { vocab_size: vocab_size.max(1), ..Self::default() };
        for (response, context) in examples {
            for r in response {
                let row = scorer.pairs.entry(r.clone()).or_default();
                for c in context {
                    *row.entry(c.clone()).or_default() += 1.0;
                }
                *scorer.totals.entry(r.clone()).or_default() += context.len() as f64;
            }
        }
        scorer
    }

    /// Training pairs from dialogues: each utterance after the first is a
    /// response to all utterances before it.
    pub fn from_dialogues(dialogues: &[Dialogue], vocab_size: usize) -> Self {
        let mut examples: Vec<(Vec<String>, Vec<String>)> = Vec::new();
        for d in dialogues {
            for i in 1..d.utterances.len() {
                let context: Vec<String> = d.utterances[..i].iter().flat_map(|u| u.tokens.iter().cloned()).collect();
                examples.push((d.utterances[i].tokens.clone(), context));
            }
        }
        Self::train(examples.iter().map(|(r, c)| (r.as_slice(), c.as_slice())), vocab_size)
    }

    pub fn prob(&self, context_token: &str, response_token: &str) -> f64 {
        let count = self.pairs.get(response_token).and_then(|row| row.get(context_token)).copied().unwrap_or(0.0);
        let total = self.totals.get(response_token).copied().unwrap_or(0.0);
        (count + 1.0) / (total + self.vocab_size as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GenerationError> {
        let path = path.as_ref();
        let json = serde_json::to_vec(self).expect("scorer serializes");
        std::fs::write(path, json)
            .map_err(|e| GenerationError::Scorer { path: path.display().to_string(), message: e.to_string() })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GenerationError> {
        let path = path.as_ref();
        let err = |message: String| GenerationError::Scorer { path: path.display().to_string(), message };
        let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_slice(&bytes).map_err(|e| err(e.to_string()))
    }
}

impl BackwardScorer for MmiScorer {
    fn score(&self, context: &[String], response: &[String]) -> f64 {
        if context.is_empty() || response.is_empty() {
            return f64::NEG_INFINITY;
        }
        let total: f64 = context
            .iter()
            .map(|c| (response.iter().map(|r| self.prob(c, r)).sum::<f64>() / response.len() as f64).ln())
            .sum();
        total / context.len() as f64
    }
}

/// Picks the candidate with the highest backward score; ties go to the
/// earliest candidate.
pub fn mmi_rerank(
    candidates: Vec<PrototypeResponse>,
    context: &Dialogue,
    scorer: &dyn BackwardScorer,
) -> Result<PrototypeResponse, GenerationError> {
    if candidates.is_empty() {
        return Err(GenerationError::Precondition("no candidates to rerank".into()));
    }
    let context_tokens: Vec<String> = context.utterances.iter().flat_map(|u| u.tokens.iter().cloned()).collect();
    let scores: Vec<f64> = candidates.iter().map(|c| scorer.score(&context_tokens, &c.tokens)).collect();
    let mut best = 0;
    for (i, s) in scores.iter().enumerate() {
        if *s > scores[best] {
            best = i;
        }
    }
    let all: Vec<Vec<String>> = candidates.iter().map(|c| c.tokens.clone()).collect();
    let mut chosen = candidates.into_iter().nth(best).expect("index in range");
    chosen.candidates = all;
    chosen.mmi_scores = scores;
    Ok(chosen)
}

/// Samples `config.mmi_candidates` responses and reranks them.
pub fn generate_with_mmi(
    context: &Dialogue,
    backend: &dyn LanguageModel,
    scorer: &dyn BackwardScorer,
    config: &DecodeConfig,
) -> Result<PrototypeResponse, GenerationError> {
    let candidates = generate_candidates(context, backend, config, config.mmi_candidates)?;
    mmi_rerank(candidates, context, scorer)
}
