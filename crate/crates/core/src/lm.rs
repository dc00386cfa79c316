//! Language-model backends. [`LanguageModel`] is the decoding interface the
//! prototype generator needs; [`LatentLanguageModel`] adds the key/value
//! hooks gradient steering works through. [`TransformerLm`] is the trainable
//! default; an external pretrained model plugs in by implementing the traits.

use crate::text::{TokenId, Vocab};
use crate::transformer::Block;
use crate::train::{epoch_batches, EpochRecord};
use emodial_nn::{causal_mask, Adam, AdamConfig, Checkpoint, CheckpointError, GradBuffer, LayerNorm, Linear, Mat, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

pub const TRANSFORMER_KIND: &str = "transformer-lm";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid language model configuration: {0}")]
    Config(String),
    #[error("context of {len} tokens exceeds the model's {max} positions")]
    TooLong { len: usize, max: usize },
    #[error("backend failure: {0}")]
    Backend(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

pub trait LanguageModel {
    fn vocab(&self) -> &Vocab;

    /// Unnormalized scores for the token following `context`.
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError>;
}

/// Per-layer attention history of a prefix plus its final hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct Latents {
    /// One `t x d` key matrix per layer.
    pub keys: Vec<Mat>,
    pub values: Vec<Mat>,
    /// Final (normalized) hidden state per position, `t x d`.
    pub hidden: Mat,
    /// Next-token logits after the last prefix position.
    pub logits: Vec<f64>,
}

impl Latents {
    pub fn len(&self) -> usize {
        self.hidden.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.hidden.rows() == 0
    }

    /// Appends one position's keys and values.
    pub fn push(&mut self, keys: &[Mat], values: &[Mat], hidden: &Mat, logits: Vec<f64>) {
        for (k, new) in self.keys.iter_mut().zip(keys) {
            *k = stack(k, new);
        }
        for (v, new) in self.values.iter_mut().zip(values) {
            *v = stack(v, new);
        }
        self.hidden = stack(&self.hidden, hidden);
        self.logits = logits;
    }
}

fn stack(a: &Mat, b: &Mat) -> Mat {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Mat::from_vec(a.rows() + b.rows(), b.cols(), data)
}

/// Tape handles produced by one incremental step.
#[derive(Clone, Debug)]
pub struct StepVars {
    pub logits: Var,
    pub hidden: Var,
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
}

pub trait LatentLanguageModel: LanguageModel {
    fn layers(&self) -> usize;
    fn hidden_dim(&self) -> usize;
    fn max_positions(&self) -> usize;

    /// Runs the prefix and returns its attention history.
    fn prefix_latents(&self, tokens: &[TokenId]) -> Result<Latents, LmError>;

    /// Frozen token-embedding table (`|V| x d`) bound on `tape`.
    fn token_embeddings(&self, tape: &mut Tape) -> Var;

    /// One decoding step at `position` from an input embedding (1 x d, without
    /// the position term) attending over `past_keys`/`past_values` plus itself.
    /// Model weights are bound frozen, so gradients reach only the inputs.
    fn step_on_tape(&self, tape: &mut Tape, input: Var, position: usize, past_keys: &[Var], past_values: &[Var]) -> StepVars;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self { layers: 2, dim: 32, heads: 2, max_positions: 96, mlp_ratio: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 3e-3, batch_size: 16, seed: 0 }
    }
}

/// Decoder-only pre-LN transformer.
#[derive(Clone, Debug)]
pub struct TransformerLm {
    config: LmConfig,
    vocab: Vocab,
    store: ParamStore,
    tokens: emodial_nn::ParamId,
    positions: emodial_nn::ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl TransformerLm {
    pub fn new(config: LmConfig, vocab: &Vocab, seed: u64) -> Result<Self, LmError> {
        if config.layers == 0 || config.heads == 0 || config.dim % config.heads != 0 || config.max_positions < 2 {
            return Err(LmError::Config(format!("unusable shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let tokens = store.add_normal("tokens", vocab.len(), d, 0.1, &mut rng);
        let positions = store.add_normal("positions", config.max_positions, d, 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut store, &format!("block{l}"), d, config.heads, config.mlp_ratio, false, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let head = Linear::new(&mut store, "head", d, vocab.len(), &mut rng);
        Ok(Self { config, vocab: vocab.clone(), store, tokens, positions, blocks, ln_f, head })
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Full causal pass; returns (final hidden, logits, per-layer keys, per-layer values).
    fn forward_seq(&self, tape: &mut Tape, ids: &[TokenId]) -> (Var, Var, Vec<Var>, Vec<Var>) {
        let t = ids.len();
        let tok = tape.param(&self.store, self.tokens);
        let pos = tape.param(&self.store, self.positions);
        let e = tape.gather_rows(tok, ids);
        let p = tape.slice_rows(pos, 0, t);
        let mut x = tape.add(e, p);
        let mask = causal_mask(t, t, 0);
        let mut keys = Vec::with_capacity(self.blocks.len());
        let mut values = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(tape, &self.store, x, Some(&mask), None, None);
            keys.push(out.keys);
            values.push(out.values);
            x = out.x;
        }
        let hidden = self.ln_f.forward(tape, &self.store, x);
        let logits = self.head.forward(tape, &self.store, hidden);
        (hidden, logits, keys, values)
    }

    /// Summed next-token negative log-likelihood of `ids` (all but the first token are targets).
    fn sequence_nll(&self, tape: &mut Tape, ids: &[TokenId]) -> Var {
        let (_, logits, _, _) = self.forward_seq(tape, &ids[..ids.len() - 1]);
        let lp = tape.log_softmax_rows(logits);
        tape.nll(lp, &ids[1..])
    }

    /// Mean per-token negative log-likelihood.
    pub fn mean_nll(&self, sequences: &[Vec<TokenId>]) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in sequences.iter().flat_map(|s| self.windows(s)) {
            let mut tape = Tape::new();
            tape.freeze(&self.store);
            let l = self.sequence_nll(&mut tape, &s);
            total += tape.value(l).item();
            count += s.len() - 1;
        }
        total / count.max(1) as f64
    }

    /// Splits a sequence into trainable windows of at most `max_positions + 1` tokens.
    fn windows(&self, seq: &[TokenId]) -> Vec<Vec<TokenId>> {
        let span = self.config.max_positions + 1;
        if seq.len() < 2 {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut start = 0;
        loop {
            let end = (start + span).min(seq.len());
            out.push(seq[start..end].to_vec());
            if end == seq.len() {
                break;
            }
            start = end - 1;
        }
        out
    }

    /// Hidden states of the final layer for a standalone sequence.
    pub fn hidden_states(&self, ids: &[TokenId]) -> Result<Mat, LmError> {
        self.check_len(ids.len())?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let (hidden, _, _, _) = self.forward_seq(&mut tape, ids);
        Ok(tape.value(hidden).clone())
    }

    fn check_len(&self, len: usize) -> Result<(), LmError> {
        if len == 0 {
            return Err(LmError::Backend("empty context".into()));
        }
        if len > self.config.max_positions {
            return Err(LmError::TooLong { len, max: self.config.max_positions });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(
            TRANSFORMER_KIND,
            &self.vocab.compat_hash(),
            serde_json::json!({ "config": self.config, "vocab_size": self.vocab.len() }),
            &self.store,
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LmError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocab) -> Result<Self, LmError> {
        ck.expect_kind(TRANSFORMER_KIND)?;
        if ck.compat != vocab.compat_hash() {
            return Err(LmError::Config(format!("checkpoint vocabulary hash {} differs from {}", ck.compat, vocab.compat_hash())));
        }
        let config: LmConfig =
            serde_json::from_value(ck.meta["config"].clone()).map_err(|e| LmError::Checkpoint(CheckpointError::Header(e)))?;
        let mut lm = Self::new(config, vocab, 0)?;
        ck.restore_into(&mut lm.store)?;
        Ok(lm)
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, LmError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab)
    }
}

impl LanguageModel for TransformerLm {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Contexts longer than the position table keep their most recent tokens.
    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let start = context.len().saturating_sub(self.config.max_positions);
        let ids = &context[start..];
        self.check_len(ids.len())?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let (_, logits, _, _) = self.forward_seq(&mut tape, ids);
        let lm = tape.value(logits);
        Ok(lm.row(lm.rows() - 1).to_vec())
    }
}

impl LatentLanguageModel for TransformerLm {
    fn layers(&self) -> usize {
        self.config.layers
    }

    fn hidden_dim(&self) -> usize {
        self.config.dim
    }

    fn max_positions(&self) -> usize {
        self.config.max_positions
    }

    fn prefix_latents(&self, tokens: &[TokenId]) -> Result<Latents, LmError> {
        self.check_len(tokens.len())?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let (hidden, logits, keys, values) = self.forward_seq(&mut tape, tokens);
        let lm = tape.value(logits);
        Ok(Latents {
            keys: keys.iter().map(|&k| tape.value(k).clone()).collect(),
            values: values.iter().map(|&v| tape.value(v).clone()).collect(),
            hidden: tape.value(hidden).clone(),
            logits: lm.row(lm.rows() - 1).to_vec(),
        })
    }

    fn token_embeddings(&self, tape: &mut Tape) -> Var {
        tape.frozen_param(&self.store, self.tokens)
    }

    fn step_on_tape(&self, tape: &mut Tape, input: Var, position: usize, past_keys: &[Var], past_values: &[Var]) -> StepVars {
        assert!(position < self.config.max_positions, "position {position} beyond the position table");
        tape.freeze(&self.store);
        let pos = tape.param(&self.store, self.positions);
        let p = tape.slice_rows(pos, position, 1);
        let mut x = tape.add(input, p);
        let mut keys = Vec::with_capacity(self.blocks.len());
        let mut values = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let out = block.forward(tape, &self.store, x, None, Some((past_keys[l], past_values[l])), None);
            keys.push(out.keys);
            values.push(out.values);
            x = out.x;
        }
        let hidden = self.ln_f.forward(tape, &self.store, x);
        let logits = self.head.forward(tape, &self.store, hidden);
        StepVars { logits, hidden, keys, values }
    }
}

/// Teacher-forced training on token sequences; sequences longer than the
/// position table are cut into overlapping windows.
pub fn train_lm(
    sequences: &[Vec<TokenId>],
    vocab: &Vocab,
    config: LmConfig,
    tc: &LmTrainConfig,
) -> Result<(TransformerLm, Vec<EpochRecord>), LmError> {
    let mut lm = TransformerLm::new(config, vocab, tc.seed)?;
    let windows: Vec<Vec<TokenId>> = sequences.iter().flat_map(|s| lm.windows(s)).collect();
    if windows.is_empty() {
        return Err(LmError::Config("no training sequence has two or more tokens".into()));
    }
    let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &lm.store);
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in epoch_batches(windows.len(), tc.batch_size, tc.seed, epoch) {
            let mut buf = GradBuffer::zeros_like(&lm.store);
            let mut count = 0usize;
            for &i in &batch {
                let mut tape = Tape::new();
                let loss = lm.sequence_nll(&mut tape, &windows[i]);
                total += tape.value(loss).item();
                count += windows[i].len() - 1;
                let grads = tape.backward(loss);
                buf.accumulate(&tape, &grads);
            }
            tokens += count;
            buf.scale(1.0 / count as f64);
            adam.step(&mut lm.store, &buf);
        }
        log.push(EpochRecord { epoch: epoch + 1, train_loss: total / tokens as f64, valid_loss: None, valid_accuracy: None });
    }
    Ok((lm, log))
}

/// Table-driven bigram model: logits depend only on the last context token.
#[derive(Clone, Debug)]
pub struct BigramLm {
    vocab: Vocab,
    logits: Mat,
}

/// Score given to transitions never observed.
pub const UNSEEN_LOGIT: f64 = -1e9;

impl BigramLm {
    /// `logits` row `a` holds the scores of the token following `a`.
    pub fn from_logits(vocab: &Vocab, logits: Mat) -> Self {
        assert_eq!(logits.shape(), (vocab.len(), vocab.len()), "bigram table must be |V| x |V|");
        Self { vocab: vocab.clone(), logits }
    }

    /// Maximum-likelihood estimate from token sequences; unseen transitions get
    /// [`UNSEEN_LOGIT`], and rows never seen as predecessors are uniform.
    pub fn estimate(vocab: &Vocab, sequences: &[Vec<TokenId>]) -> Self {
        let n = vocab.len();
        let mut counts: HashMap<(TokenId, TokenId), f64> = HashMap::new();
        for s in sequences {
            for w in s.windows(2) {
                *counts.entry((w[0], w[1])).or_default() += 1.0;
            }
        }
        let mut logits = Mat::zeros(n, n);
        let mut seen_rows = vec![false; n];
        for &(a, _) in counts.keys() {
            seen_rows[a] = true;
        }
        for (a, seen) in seen_rows.iter().enumerate() {
            if *seen {
                logits.row_mut(a).fill(UNSEEN_LOGIT);
            }
        }
        for (&(a, b), &c) in &counts {
            logits.set(a, b, c.ln());
        }
        Self { vocab: vocab.clone(), logits }
    }
}

impl LanguageModel for BigramLm {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_token_logits(&self, context: &[TokenId]) -> Result<Vec<f64>, LmError> {
        let last = *context.last().ok_or_else(|| LmError::Backend("empty context".into()))?;
        Ok(self.logits.row(last).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn setup() -> (Vocab, TransformerLm) {
        let v = Vocab::build([tokenize("the food is good . the movie is bad .").as_slice()], 1);
        let lm = TransformerLm::new(LmConfig { dim: 8, heads: 2, max_positions: 12, ..Default::default() }, &v, 4).unwrap();
        (v, lm)
    }

    #[test]
    fn incremental_step_matches_full_pass() {
        let (v, lm) = setup();
        let ids = v.encode(&tokenize("the food is good ."));
        let prefix = lm.prefix_latents(&ids[..4]).unwrap();
        let full = lm.prefix_latents(&ids).unwrap();
        let mut tape = Tape::new();
        let table = lm.token_embeddings(&mut tape);
        let input = tape.gather_rows(table, &ids[4..5]);
        let pk: Vec<Var> = prefix.keys.iter().map(|k| tape.constant(k.clone())).collect();
        let pv: Vec<Var> = prefix.values.iter().map(|k| tape.constant(k.clone())).collect();
        let step = lm.step_on_tape(&mut tape, input, 4, &pk, &pv);
        let logits = tape.value(step.logits);
        for (a, b) in logits.row(0).iter().zip(&full.logits) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(tape.value(step.hidden).row(0).iter().zip(full.hidden.row(4)).all(|(a, b)| (a - b).abs() < 1e-10));
        let mut grown = prefix.clone();
        let ks: Vec<Mat> = step.keys.iter().map(|&k| tape.value(k).clone()).collect();
        let vs: Vec<Mat> = step.values.iter().map(|&k| tape.value(k).clone()).collect();
        grown.push(&ks, &vs, tape.value(step.hidden), logits.row(0).to_vec());
        assert!(grown.keys[1].max_abs_diff(&full.keys[1]) < 1e-10);
    }

    #[test]
    fn training_reduces_loss_and_checkpoint_roundtrips() {
        let (v, _) = setup();
        let seqs: Vec<Vec<TokenId>> =
            ["the food is good .", "the movie is bad ."].iter().map(|s| v.encode(&tokenize(s))).collect();
        let cfg = LmConfig { dim: 8, heads: 2, max_positions: 12, ..Default::default() };
        let (lm, log) = train_lm(&seqs, &v, cfg, &LmTrainConfig { epochs: 30, lr: 1e-2, batch_size: 2, seed: 1 }).unwrap();
        assert!(log.last().unwrap().train_loss < log[0].train_loss);
        let back = TransformerLm::from_checkpoint(&lm.to_checkpoint(), &v).unwrap();
        assert_eq!(back.next_token_logits(&seqs[0][..2]).unwrap(), lm.next_token_logits(&seqs[0][..2]).unwrap());
    }

    #[test]
    fn long_contexts_keep_recent_tokens() {
        let (v, lm) = setup();
        let ids: Vec<TokenId> = (0..30).map(|i| 4 + i % 5).collect();
        assert_eq!(lm.next_token_logits(&ids).unwrap(), lm.next_token_logits(&ids[18..]).unwrap());
        assert!(matches!(lm.prefix_latents(&ids), Err(LmError::TooLong { .. })));
        assert!(lm.next_token_logits(&[]).is_err());
        assert_eq!(lm.windows(&ids).len(), 3);
        let _ = v;
    }

    #[test]
    fn bigram_estimate_blocks_unseen() {
        let v = Vocab::build([tokenize("a b c").as_slice()], 1);
        let lm = BigramLm::estimate(&v, &[v.encode(&tokenize("a b c"))]);
        let l = lm.next_token_logits(&[v.id("a")]).unwrap();
        assert_eq!(l[v.id("b")], 0.0);
        assert_eq!(l[v.id("c")], UNSEEN_LOGIT);
        assert!(lm.next_token_logits(&[v.id("c")]).unwrap().iter().all(|&x| x == 0.0));
    }
}
