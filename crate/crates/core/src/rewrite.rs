//! Rewrite refiner: an attention-based polarity classifier marks the
//! emotion-bearing tokens, they are deleted, and a style-conditioned
//! encoder-decoder regenerates the sentence in the target polarity.

use crate::corpus::{LabeledSentence, Polarity};
use crate::text::{TokenId, Vocab};
use crate::train::{epoch_batches, EpochRecord};
use crate::transformer::Block;
use emodial_nn::{argmax, causal_mask, Adam, AdamConfig, Checkpoint, CheckpointError, GradBuffer, LayerNorm, Linear, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const EXTRACTOR_KIND: &str = "saliency-extractor";
pub const GENERATOR_KIND: &str = "styled-generator";

#[derive(Debug, Error)]
pub enum RewriteError {
    #[error("invalid rewrite configuration: {0}")]
    Config(String),
    #[error("sentence of {len} tokens exceeds the limit of {max}")]
    Truncation { len: usize, max: usize },
    #[error("rewrite precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractorConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// Longest accepted sentence, not counting the classification position.
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self { dim: 32, heads: 2, layers: 1, max_len: 32, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { dim: 48, heads: 4, encoder_layers: 1, decoder_layers: 2, max_len: 32, mlp_ratio: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteTrainConfig {
    pub extractor_epochs: usize,
    pub generator_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Deletion threshold multiplier: delete when α > mean + λ·std.
    pub lambda: f64,
    /// Learning rate decays linearly to `lr * final_lr_fraction` over each stage.
    pub final_lr_fraction: f64,
}

impl RewriteTrainConfig {
    fn lr_at(&self, epoch: usize, epochs: usize) -> f64 {
        let t = if epochs > 1 { epoch as f64 / (epochs - 1) as f64 } else { 0.0 };
        self.lr * (1.0 - t * (1.0 - self.final_lr_fraction))
    }
}

impl Default for RewriteTrainConfig {
    fn default() -> Self {
        Self { extractor_epochs: 10, generator_epochs: 30, lr: 3e-3, batch_size: 16, seed: 0, lambda: 1.0, final_lr_fraction: 0.1 }
    }
}

/// Per-token attention weights summing to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionSaliency(pub Vec<f64>);

/// What survives deletion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContentSentence {
    pub tokens: Vec<String>,
    /// One flag per original token; `true` marks a deleted token.
    pub deleted: Vec<bool>,
    pub source: Polarity,
}

/// Removes tokens whose saliency exceeds `mean + lambda * std` (population
/// std). If that would remove everything, the least salient token (earliest
/// on ties) is kept.
pub fn delete_emotion_tokens(sentence: &[String], saliency: &[f64], lambda: f64, source: Polarity) -> ContentSentence {
    assert_eq!(sentence.len(), saliency.len(), "one saliency weight per token");
    if sentence.is_empty() {
        return ContentSentence { tokens: Vec::new(), deleted: Vec::new(), source };
    }
    let n = saliency.len() as f64;
    let mean = saliency.iter().sum::<f64>() / n;
    let std = (saliency.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    let threshold = mean + lambda * std;
    let mut deleted: Vec<bool> = saliency.iter().map(|&a| a > threshold).collect();
    if deleted.iter().all(|&d| d) {
        let keep = (0..saliency.len()).fold(0, |best, i| if saliency[i] < saliency[best] { i } else { best });
        deleted[keep] = false;
    }
    let tokens = sentence.iter().zip(&deleted).filter(|(_, &d)| !d).map(|(t, _)| t.clone()).collect();
    ContentSentence { tokens, deleted, source }
}

fn compat_check(ck: &Checkpoint, kind: &str, vocab: &Vocab) -> Result<(), RewriteError> {
    ck.expect_kind(kind)?;
    if ck.compat != vocab.compat_hash() {
        return Err(RewriteError::Config(format!("checkpoint vocabulary hash {} differs from {}", ck.compat, vocab.compat_hash())));
    }
    Ok(())
}

fn meta_config<T: serde::de::DeserializeOwned>(ck: &Checkpoint) -> Result<T, RewriteError> {
    serde_json::from_value(ck.meta["config"].clone()).map_err(|e| RewriteError::Checkpoint(CheckpointError::Header(e)))
}

/// Self-attention polarity classifier reading a prepended classification position.
#[derive(Clone, Debug)]
pub struct SaliencyExtractor {
    config: ExtractorConfig,
    vocab: Vocab,
    store: ParamStore,
    tokens: ParamId,
    positions: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl SaliencyExtractor {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn new(config: ExtractorConfig, vocab: &Vocab, seed: u64) -> Result<Self, RewriteError> {
        if config.layers == 0 || config.heads == 0 || config.dim % config.heads != 0 || config.max_len == 0 {
            return Err(RewriteError::Config(format!("unusable extractor shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let tokens = store.add_normal("tokens", vocab.len(), d, 0.1, &mut rng);
        let positions = store.add_normal("positions", config.max_len + 1, d, 0.02, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| Block::new(&mut store, &format!("block{l}"), d, config.heads, config.mlp_ratio, false, &mut rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", d);
        let head = Linear::new(&mut store, "head", d, 2, &mut rng);
        Ok(Self { config, vocab: vocab.clone(), store, tokens, positions, blocks, ln_f, head })
    }

    pub fn config(&self) -> &ExtractorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn ids(&self, sentence: &[String]) -> Result<Vec<TokenId>, RewriteError> {
        if sentence.is_empty() {
            return Err(RewriteError::Precondition("empty sentence".into()));
        }
        if sentence.len() > self.config.max_len {
            return Err(RewriteError::Truncation { len: sentence.len(), max: self.config.max_len });
        }
        let mut ids = vec![self.vocab.cls()];
        ids.extend(self.vocab.encode(sentence));
        Ok(ids)
    }

    /// Returns the class logits (1 x 2) and the last layer's per-head attention.
    fn forward(&self, tape: &mut Tape, ids: &[TokenId]) -> (Var, Vec<Var>) {
        let tok = tape.param(&self.store, self.tokens);
        let pos = tape.param(&self.store, self.positions);
        let e = tape.gather_rows(tok, ids);
        let p = tape.slice_rows(pos, 0, ids.len());
        let mut x = tape.add(e, p);
        let mut weights = Vec::new();
        for block in &self.blocks {
            let out = block.forward(tape, &self.store, x, None, None, None);
            x = out.x;
            weights = out.weights;
        }
        let h = self.ln_f.forward(tape, &self.store, x);
        let cls = tape.slice_rows(h, 0, 1);
        (self.head.forward(tape, &self.store, cls), weights)
    }

    /// `[p(negative), p(positive)]`.
    pub fn classify(&self, sentence: &[String]) -> Result<[f64; 2], RewriteError> {
        let ids = self.ids(sentence)?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let (logits, _) = self.forward(&mut tape, &ids);
        let p = emodial_nn::softmax(tape.value(logits).row(0));
        Ok([p[0], p[1]])
    }

    pub fn polarity(&self, sentence: &[String]) -> Result<Polarity, RewriteError> {
        Ok(Polarity::from_index(argmax(&self.classify(sentence)?)))
    }

    /// Classification-position attention row of the last layer, averaged over
    /// heads, with the classification column dropped and the rest renormalized.
    pub fn saliency(&self, sentence: &[String]) -> Result<AttentionSaliency, RewriteError> {
        let ids = self.ids(sentence)?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let (_, weights) = self.forward(&mut tape, &ids);
        let mut row = vec![0.0; sentence.len()];
        for w in &weights {
            for (r, &a) in row.iter_mut().zip(&tape.value(*w).row(0)[1..]) {
                *r += a / weights.len() as f64;
            }
        }
        let total: f64 = row.iter().sum();
        Ok(AttentionSaliency(row.into_iter().map(|a| a / total).collect()))
    }

    /// Summed cross-entropy of one labelled sentence, gradient into `buf`.
    fn example_loss(&self, ids: &[TokenId], label: usize, buf: &mut GradBuffer) -> f64 {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, ids);
        let lp = tape.log_softmax_rows(logits);
        let loss = tape.nll(lp, &[label]);
        let grads = tape.backward(loss);
        buf.accumulate(&tape, &grads);
        tape.value(loss).item()
    }

    pub fn accuracy(&self, corpus: &[LabeledSentence]) -> Result<f64, RewriteError> {
        let mut correct = 0;
        for s in corpus {
            correct += usize::from(self.polarity(&s.tokens)? == s.polarity);
        }
        Ok(correct as f64 / corpus.len().max(1) as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(EXTRACTOR_KIND, &self.vocab.compat_hash(), serde_json::json!({ "config": self.config }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocab) -> Result<Self, RewriteError> {
        compat_check(ck, EXTRACTOR_KIND, vocab)?;
        let mut m = Self::new(meta_config(ck)?, vocab, 0)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RewriteError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, RewriteError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab)
    }
}

/// Encoder-decoder whose decoder input starts with a polarity embedding.
#[derive(Clone, Debug)]
pub struct StyledGenerator {
    config: GeneratorConfig,
    vocab: Vocab,
    store: ParamStore,
    tokens: ParamId,
    enc_positions: ParamId,
    dec_positions: ParamId,
    styles: ParamId,
    encoder: Vec<Block>,
    enc_ln: LayerNorm,
    decoder: Vec<Block>,
    dec_ln: LayerNorm,
    head: Linear,
}

impl StyledGenerator {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn new(config: GeneratorConfig, vocab: &Vocab, seed: u64) -> Result<Self, RewriteError> {
        if config.encoder_layers == 0
            || config.decoder_layers == 0
            || config.heads == 0
            || config.dim % config.heads != 0
            || config.max_len == 0
        {
            return Err(RewriteError::Config(format!("unusable generator shape {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dim;
        let tokens = store.add_normal("tokens", vocab.len(), d, 0.1, &mut rng);
        let enc_positions = store.add_normal("enc_positions", config.max_len, d, 0.02, &mut rng);
        let dec_positions = store.add_normal("dec_positions", config.max_len + 2, d, 0.02, &mut rng);
        let styles = store.add_normal("styles", 2, d, 0.1, &mut rng);
        let encoder = (0..config.encoder_layers)
            .map(|l| Block::new(&mut store, &format!("enc{l}"), d, config.heads, config.mlp_ratio, false, &mut rng))
            .collect();
        let enc_ln = LayerNorm::new(&mut store, "enc_ln", d);
        let decoder = (0..config.decoder_layers)
            .map(|l| Block::new(&mut store, &format!("dec{l}"), d, config.heads, config.mlp_ratio, true, &mut rng))
            .collect();
        let dec_ln = LayerNorm::new(&mut store, "dec_ln", d);
        let head = Linear::new(&mut store, "head", d, vocab.len(), &mut rng);
        Ok(Self { config, vocab: vocab.clone(), store, tokens, enc_positions, dec_positions, styles, encoder, enc_ln, decoder, dec_ln, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn content_ids(&self, content: &[String]) -> Result<Vec<TokenId>, RewriteError> {
        if content.is_empty() {
            return Err(RewriteError::Precondition("content sentence is empty".into()));
        }
        if content.len() > self.config.max_len {
            return Err(RewriteError::Truncation { len: content.len(), max: self.config.max_len });
        }
        Ok(self.vocab.encode(content))
    }

    fn encode(&self, tape: &mut Tape, content: &[TokenId]) -> Var {
        let tok = tape.param(&self.store, self.tokens);
        let pos = tape.param(&self.store, self.enc_positions);
        let e = tape.gather_rows(tok, content);
        let p = tape.slice_rows(pos, 0, content.len());
        let mut x = tape.add(e, p);
        for block in &self.encoder {
            x = block.forward(tape, &self.store, x, None, None, None).x;
        }
        self.enc_ln.forward(tape, &self.store, x)
    }

    /// Logits for every decoder position given the style and `prefix` tokens.
    fn decode(&self, tape: &mut Tape, memory: Var, style: Polarity, prefix: &[TokenId]) -> Var {
        let styles = tape.param(&self.store, self.styles);
        let s = tape.slice_rows(styles, style.index(), 1);
        let tok = tape.param(&self.store, self.tokens);
        let input = if prefix.is_empty() {
            s
        } else {
            let e = tape.gather_rows(tok, prefix);
            tape.concat_rows(&[s, e])
        };
        let t = prefix.len() + 1;
        let pos = tape.param(&self.store, self.dec_positions);
        let p = tape.slice_rows(pos, 0, t);
        let mut x = tape.add(input, p);
        let mask = causal_mask(t, t, 0);
        for block in &self.decoder {
            x = block.forward(tape, &self.store, x, Some(&mask), None, Some(memory)).x;
        }
        let h = self.dec_ln.forward(tape, &self.store, x);
        self.head.forward(tape, &self.store, h)
    }

    /// Summed negative log-likelihood of `target` followed by the separator.
    fn reconstruction_nll(&self, tape: &mut Tape, content: &[TokenId], style: Polarity, target: &[TokenId]) -> Var {
        let memory = self.encode(tape, content);
        let logits = self.decode(tape, memory, style, target);
        let lp = tape.log_softmax_rows(logits);
        let mut targets = target.to_vec();
        targets.push(self.vocab.sep());
        tape.nll(lp, &targets)
    }

    /// Mean per-token reconstruction loss over `(content, style, target)` triples.
    pub fn reconstruction_loss(&self, data: &[(Vec<String>, Polarity, Vec<String>)]) -> Result<f64, RewriteError> {
        let mut total = 0.0;
        let mut count = 0;
        for (c, s, t) in data {
            let content = self.content_ids(c)?;
            let target = self.target_ids(t)?;
            let mut tape = Tape::new();
            tape.freeze(&self.store);
            let l = self.reconstruction_nll(&mut tape, &content, *s, &target);
            total += tape.value(l).item();
            count += target.len() + 1;
        }
        Ok(total / count.max(1) as f64)
    }

    fn target_ids(&self, target: &[String]) -> Result<Vec<TokenId>, RewriteError> {
        if target.len() > self.config.max_len {
            return Err(RewriteError::Truncation { len: target.len(), max: self.config.max_len });
        }
        Ok(self.vocab.encode(target))
    }

    /// Greedy decode of `content` in `style`; stops at the separator or `max_len` tokens.
    pub fn generate(&self, content: &[String], style: Polarity) -> Result<Vec<String>, RewriteError> {
        let content = self.content_ids(content)?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let memory = self.encode(&mut tape, &content);
        let mut out: Vec<TokenId> = Vec::new();
        let blocked = [self.vocab.pad(), self.vocab.unk(), self.vocab.cls()];
        while out.len() < self.config.max_len {
            let logits = self.decode(&mut tape, memory, style, &out);
            let lm = tape.value(logits);
            let mut row = lm.row(lm.rows() - 1).to_vec();
            for &b in &blocked {
                row[b] = f64::NEG_INFINITY;
            }
            if out.is_empty() {
                row[self.vocab.sep()] = f64::NEG_INFINITY;
            }
            let next = argmax(&row);
            if next == self.vocab.sep() {
                break;
            }
            out.push(next);
        }
        Ok(self.vocab.decode(&out))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(GENERATOR_KIND, &self.vocab.compat_hash(), serde_json::json!({ "config": self.config }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocab) -> Result<Self, RewriteError> {
        compat_check(ck, GENERATOR_KIND, vocab)?;
        let mut m = Self::new(meta_config(ck)?, vocab, 0)?;
        ck.restore_into(&mut m.store)?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RewriteError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, RewriteError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewriteTrainLog {
    pub extractor: Vec<EpochRecord>,
    pub generator: Vec<EpochRecord>,
}

#[derive(Clone, Debug)]
pub struct Rewriter {
    pub extractor: SaliencyExtractor,
    pub generator: StyledGenerator,
}

/// Content left after deleting the salient tokens of `sentence`.
pub fn content_of(extractor: &SaliencyExtractor, sentence: &[String], lambda: f64) -> Result<ContentSentence, RewriteError> {
    let saliency = extractor.saliency(sentence)?;
    let source = extractor.polarity(sentence)?;
    Ok(delete_emotion_tokens(sentence, &saliency.0, lambda, source))
}

/// Trains the extractor as a polarity classifier, derives each sentence's
/// content by deletion, then trains the generator to reconstruct the sentence
/// from its content and gold polarity.
pub fn train_rewriter(
    train: &[LabeledSentence],
    valid: &[LabeledSentence],
    vocab: &Vocab,
    extractor_config: ExtractorConfig,
    generator_config: GeneratorConfig,
    tc: &RewriteTrainConfig,
) -> Result<(Rewriter, RewriteTrainLog), RewriteError> {
    for p in Polarity::ALL {
        if !train.iter().any(|s| s.polarity == p) {
            return Err(RewriteError::Config(format!("training corpus has no {p} sentences")));
        }
    }
    if tc.batch_size == 0 {
        return Err(RewriteError::Config("batch_size must be positive".into()));
    }
    let mut log = RewriteTrainLog::default();

    let mut extractor = SaliencyExtractor::new(extractor_config, vocab, tc.seed)?;
    let ids = train.iter().map(|s| extractor.ids(&s.tokens)).collect::<Result<Vec<_>, _>>()?;
    let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &extractor.store);
    for epoch in 0..tc.extractor_epochs {
        adam.config.lr = tc.lr_at(epoch, tc.extractor_epochs);
        let mut total = 0.0;
        for batch in epoch_batches(train.len(), tc.batch_size, tc.seed, epoch) {
            let mut buf = GradBuffer::zeros_like(&extractor.store);
            for &i in &batch {
                total += extractor.example_loss(&ids[i], train[i].polarity.index(), &mut buf);
            }
            buf.scale(1.0 / batch.len() as f64);
            adam.step(&mut extractor.store, &buf);
        }
        let valid_accuracy = if valid.is_empty() { None } else { Some(extractor.accuracy(valid)?) };
        log.extractor.push(EpochRecord { epoch: epoch + 1, train_loss: total / train.len() as f64, valid_loss: None, valid_accuracy });
    }

    let triples = |set: &[LabeledSentence]| -> Result<Vec<(Vec<String>, Polarity, Vec<String>)>, RewriteError> {
        set.iter()
            .map(|s| Ok((content_of(&extractor, &s.tokens, tc.lambda)?.tokens, s.polarity, s.tokens.clone())))
            .collect()
    };
    let train_data = triples(train)?;
    let valid_data = triples(valid)?;

    let mut generator = StyledGenerator::new(generator_config, vocab, tc.seed.wrapping_add(1))?;
    let encoded = train_data
        .iter()
        .map(|(c, s, t)| Ok((generator.content_ids(c)?, *s, generator.target_ids(t)?)))
        .collect::<Result<Vec<_>, RewriteError>>()?;
    let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &generator.store);
    for epoch in 0..tc.generator_epochs {
        adam.config.lr = tc.lr_at(epoch, tc.generator_epochs);
        let mut total = 0.0;
        let mut tokens = 0usize;
        for batch in epoch_batches(encoded.len(), tc.batch_size, tc.seed, epoch) {
            let mut buf = GradBuffer::zeros_like(&generator.store);
            let mut count = 0;
            for &i in &batch {
                let (c, s, t) = &encoded[i];
                let mut tape = Tape::new();
                let loss = generator.reconstruction_nll(&mut tape, c, *s, t);
                total += tape.value(loss).item();
                count += t.len() + 1;
                let grads = tape.backward(loss);
                buf.accumulate(&tape, &grads);
            }
            tokens += count;
            buf.scale(1.0 / count as f64);
            adam.step(&mut generator.store, &buf);
        }
        let valid_loss = if valid_data.is_empty() { None } else { Some(generator.reconstruction_loss(&valid_data)?) };
        log.generator.push(EpochRecord { epoch: epoch + 1, train_loss: total / tokens as f64, valid_loss, valid_accuracy: None });
    }
    Ok((Rewriter { extractor, generator }, log))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewriteOutcome {
    pub saliency: AttentionSaliency,
    pub content: ContentSentence,
    pub tokens: Vec<String>,
}

impl Rewriter {
    /// Deletes the salient tokens of `prototype` and regenerates it in `target` style.
    pub fn rewrite(&self, prototype: &[String], target: Polarity, lambda: f64) -> Result<RewriteOutcome, RewriteError> {
        let saliency = self.extractor.saliency(prototype)?;
        let source = self.extractor.polarity(prototype)?;
        let content = delete_emotion_tokens(prototype, &saliency.0, lambda, source);
        let tokens = self.generator.generate(&content.tokens, target)?;
        Ok(RewriteOutcome { saliency, content, tokens })
    }
}
