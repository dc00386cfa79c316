//! Dialogue emotion detector: a CNN utterance encoder feeding a windowed,
//! relation-typed graph over the conversation and a bidirectional GRU, whose
//! outputs are fused by bilinear attention pooling and classified per
//! utterance. Also hosts the empathy rule that turns the detected emotions
//! into the response's target polarity.

use crate::corpus::{map_polarity, CorpusError, Dialogue, EmotionLabel, Polarity, PolarityGroups};
use crate::text::{TokenId, Vocab};
use crate::train::{epoch_batches, EpochRecord};
use emodial_nn::{argmax, Adam, AdamConfig, Checkpoint, CheckpointError, GradBuffer, GruCell, Linear, Mat, ParamId, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CHECKPOINT_KIND: &str = "emotion-detector";

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("invalid detector configuration: {0}")]
    Config(String),
    #[error("detector precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Taxonomy(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("cannot read embedding file {path}: {message}")]
    Embeddings { path: String, message: String },
}

/// Graph neighbourhood: node `i` links to `i - past ..= i + future`, clipped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphWindow {
    pub past: usize,
    pub future: usize,
}

impl Default for GraphWindow {
    fn default() -> Self {
        Self { past: 2, future: 2 }
    }
}

impl GraphWindow {
    pub fn contains(&self, i: usize, j: usize) -> bool {
        j + self.past >= i && j <= i + self.future
    }

    /// Additive mask: 0 inside the window, -1e9 outside.
    pub fn mask(&self, n: usize) -> Mat {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if !self.contains(i, j) {
                    m.set(i, j, -1e9);
                }
            }
        }
        m
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub embed_dim: usize,
    pub filter_widths: Vec<usize>,
    pub filters: usize,
    pub gru_hidden: usize,
    pub graph_dim: usize,
    pub ffn_hidden: usize,
    pub window: GraphWindow,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            filter_widths: vec![3, 4, 5],
            filters: 50,
            gru_hidden: 32,
            graph_dim: 64,
            ffn_hidden: 64,
            window: GraphWindow::default(),
        }
    }
}

impl DetectorConfig {
    pub fn utterance_dim(&self) -> usize {
        self.filters * self.filter_widths.len()
    }

    fn validate(&self) -> Result<(), DetectorError> {
        if self.filter_widths.is_empty() || self.filter_widths.contains(&0) || self.filters == 0 {
            return Err(DetectorError::Config("need at least one convolution width ≥ 1 and filters ≥ 1".into()));
        }
        if [self.embed_dim, self.gru_hidden, self.graph_dim, self.ffn_hidden].contains(&0) {
            return Err(DetectorError::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
    /// Stop once validation accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    /// Word-per-line vector text file used to initialize the embedding table.
    pub pretrained_embeddings: Option<PathBuf>,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 2e-3, batch_size: 16, l2: 1e-6, seed: 0, target_accuracy: None, pretrained_embeddings: None }
    }
}

/// Detected emotion per context utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionStateSet(pub Vec<EmotionLabel>);

impl EmotionStateSet {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Empathy rule: positive iff strictly more positive than negative emotions.
pub fn response_polarity(emotions: &[EmotionLabel], groups: &PolarityGroups) -> Result<Polarity, DetectorError> {
    if emotions.is_empty() {
        return Err(DetectorError::Precondition("emotion state set is empty".into()));
    }
    let mut pos = 0usize;
    let mut neg = 0usize;
    for e in emotions {
        match map_polarity(e, groups)? {
            Polarity::Positive => pos += 1,
            Polarity::Negative => neg += 1,
        }
    }
    Ok(if pos > neg { Polarity::Positive } else { Polarity::Negative })
}

/// Edge weights of node `i` (0-based): softmax of `U_i W_u U_j` over the
/// clipped window, zero elsewhere. `vectors` holds one utterance per row.
pub fn edge_weights(i: usize, vectors: &Mat, window: GraphWindow, w_u: &Mat) -> Vec<f64> {
    let n = vectors.rows();
    assert!(i < n, "node {i} out of range for {n} utterances");
    let left = Mat::row_vector(vectors.row(i).to_vec()).matmul(w_u);
    let support: Vec<usize> = (0..n).filter(|&j| window.contains(i, j)).collect();
    let scores: Vec<f64> =
        support.iter().map(|&j| left.row(0).iter().zip(vectors.row(j)).map(|(a, b)| a * b).sum()).collect();
    let probs = emodial_nn::softmax(&scores);
    let mut out = vec![0.0; n];
    for (&j, p) in support.iter().zip(probs) {
        out[j] = p;
    }
    out
}

/// Relation class of edge `i -> j`: same/different speaker × past-or-self/future.
pub fn relation_index(speakers: &[u8], i: usize, j: usize) -> usize {
    let same = speakers[i] == speakers[j];
    let future = j > i;
    match (same, future) {
        (true, false) => 0,
        (true, true) => 1,
        (false, false) => 2,
        (false, true) => 3,
    }
}

const RELATIONS: usize = 4;

#[derive(Clone, Debug)]
struct Params {
    embedding: ParamId,
    convs: Vec<Linear>,
    gru_fwd: GruCell,
    gru_bwd: GruCell,
    edge: ParamId,
    relations: Vec<ParamId>,
    graph_bias: ParamId,
    pool: ParamId,
    ffn_hidden: Linear,
    ffn_out: Linear,
}

impl Params {
    fn build(store: &mut ParamStore, config: &DetectorConfig, vocab_len: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let e = config.embed_dim;
        let du = config.utterance_dim();
        let embedding = store.add_normal("embedding", vocab_len, e, 0.1, rng);
        let convs = config
            .filter_widths
            .iter()
            .map(|&w| Linear::new(store, &format!("conv{w}"), w * e, config.filters, rng))
            .collect();
        let gru_fwd = GruCell::new(store, "gru.fwd", du, config.gru_hidden, rng);
        let gru_bwd = GruCell::new(store, "gru.bwd", du, config.gru_hidden, rng);
        let edge = store.add_xavier("graph.edge", du, du, rng);
        let relations = (0..RELATIONS).map(|r| store.add_xavier(format!("graph.relation{r}"), du, config.graph_dim, rng)).collect();
        let graph_bias = store.add_zeros("graph.bias", 1, config.graph_dim);
        let dx = 2 * config.gru_hidden + config.graph_dim;
        let pool = store.add_xavier("pool", dx, dx, rng);
        let ffn_hidden = Linear::new(store, "ffn.hidden", dx, config.ffn_hidden, rng);
        let ffn_out = Linear::new(store, "ffn.out", config.ffn_hidden, classes, rng);
        Self { embedding, convs, gru_fwd, gru_bwd, edge, relations, graph_bias, pool, ffn_hidden, ffn_out }
    }
}

/// Tape handles of every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Utterance encodings, n x d_u.
    pub utterances: Var,
    /// Edge weights, n x n.
    pub alpha: Var,
    pub sq: Var,
    pub sp: Var,
    /// `[sq, sp]`, n x d_x.
    pub features: Var,
    /// Attention-pooling weights, n x n.
    pub beta: Var,
    pub pooled: Var,
    pub logits: Var,
}

/// Concrete values of [`ForwardVars`].
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub utterances: Mat,
    pub alpha: Mat,
    pub sq: Mat,
    pub sp: Mat,
    pub features: Mat,
    pub beta: Mat,
    pub pooled: Mat,
    pub probs: Mat,
}

#[derive(Clone, Debug)]
pub struct DetectorModel {
    config: DetectorConfig,
    groups: PolarityGroups,
    vocab: Vocab,
    store: ParamStore,
    params: Params,
}

struct Example {
    ids: Vec<Vec<TokenId>>,
    speakers: Vec<u8>,
    labels: Vec<usize>,
}

impl DetectorModel {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn new(config: DetectorConfig, groups: PolarityGroups, vocab: &Vocab, seed: u64) -> Result<Self, DetectorError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::build(&mut store, &config, vocab.len(), groups.len(), &mut rng);
        Ok(Self { config, groups, vocab: vocab.clone(), store, params })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn groups(&self) -> &PolarityGroups {
        &self.groups
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Edge-weight matrix `W_u`.
    pub fn edge_matrix(&self) -> &Mat {
        self.store.get(self.params.edge)
    }

    /// Replaces embedding rows; `table` must be vocabulary-sized.
    pub fn set_embeddings(&mut self, table: Mat) -> Result<(), DetectorError> {
        let slot = self.store.get_mut(self.params.embedding);
        if slot.shape() != table.shape() {
            return Err(DetectorError::Config(format!(
                "embedding table is {:?}, model expects {:?}",
                table.shape(),
                slot.shape()
            )));
        }
        *slot = table;
        Ok(())
    }

    fn encode_ids(&self, tokens: &[String]) -> Vec<TokenId> {
        let ids = self.vocab.encode(tokens);
        if ids.is_empty() {
            vec![self.vocab.unk()]
        } else {
            ids
        }
    }

    /// CNN encoding of one token sequence: embed, convolve per width, ReLU,
    /// max over time, concatenate widths.
    pub fn encode_tokens(&self, tape: &mut Tape, ids: &[TokenId]) -> Var {
        let table = tape.param(&self.store, self.params.embedding);
        let x = tape.gather_rows(table, ids);
        let pooled: Vec<Var> = self
            .config
            .filter_widths
            .iter()
            .zip(&self.params.convs)
            .map(|(&w, conv)| {
                let windows = tape.unfold(x, w);
                let h = conv.forward(tape, &self.store, windows);
                let h = tape.relu(h);
                tape.max_rows(h)
            })
            .collect();
        if pooled.len() == 1 {
            pooled[0]
        } else {
            tape.concat_cols(&pooled)
        }
    }

    /// Encoding of one utterance as a plain vector.
    pub fn encode_utterance(&self, tokens: &[String]) -> Vec<f64> {
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let v = self.encode_tokens(&mut tape, &self.encode_ids(tokens));
        tape.value(v).data().to_vec()
    }

    pub fn forward(&self, tape: &mut Tape, ids: &[Vec<TokenId>], speakers: &[u8]) -> ForwardVars {
        let n = ids.len();
        assert!(n >= 1 && speakers.len() == n, "forward needs one speaker per utterance");
        let rows: Vec<Var> = ids.iter().map(|u| self.encode_tokens(tape, u)).collect();
        let u = if n == 1 { rows[0] } else { tape.concat_rows(&rows) };

        let w_u = tape.param(&self.store, self.params.edge);
        let left = tape.matmul(u, w_u);
        let ut = tape.transpose(u);
        let scores = tape.matmul(left, ut);
        let scores = tape.add_const(scores, &self.config.window.mask(n));
        let alpha = tape.softmax_rows(scores);

        let mut masks = vec![Mat::zeros(n, n); RELATIONS];
        for i in 0..n {
            for j in 0..n {
                masks[relation_index(speakers, i, j)].set(i, j, 1.0);
            }
        }
        let mut messages = Vec::with_capacity(RELATIONS);
        for (mask, &w_r) in masks.into_iter().zip(&self.params.relations) {
            if mask.sum() == 0.0 {
                continue;
            }
            let m = tape.constant(mask);
            let a_r = tape.mul(alpha, m);
            let w = tape.param(&self.store, w_r);
            let projected = tape.matmul(u, w);
            messages.push(tape.matmul(a_r, projected));
        }
        let mut sp = messages[0];
        for &m in &messages[1..] {
            sp = tape.add(sp, m);
        }
        let bias = tape.param(&self.store, self.params.graph_bias);
        let sp = tape.add_row(sp, bias);
        let sp = tape.relu(sp);

        let fwd = self.params.gru_fwd.run(tape, &self.store, u, false);
        let bwd = self.params.gru_bwd.run(tape, &self.store, u, true);
        let sq = tape.concat_cols(&[fwd, bwd]);

        let features = tape.concat_cols(&[sq, sp]);
        let w = tape.param(&self.store, self.params.pool);
        let left = tape.matmul(features, w);
        let ft = tape.transpose(features);
        let sim = tape.matmul(left, ft);
        let beta = tape.softmax_rows(sim);
        let pooled = tape.matmul(beta, features);

        let h = self.params.ffn_hidden.forward(tape, &self.store, pooled);
        let h = tape.relu(h);
        let logits = self.params.ffn_out.forward(tape, &self.store, h);
        ForwardVars { utterances: u, alpha, sq, sp, features, beta, pooled, logits }
    }

    fn prepare(&self, dialogue: &Dialogue) -> Result<(Vec<Vec<TokenId>>, Vec<u8>), DetectorError> {
        if dialogue.utterances.is_empty() {
            return Err(DetectorError::Precondition(format!("dialogue {} has no utterances", dialogue.id)));
        }
        let ids = dialogue.utterances.iter().map(|u| self.encode_ids(&u.tokens)).collect();
        let speakers = dialogue.utterances.iter().map(|u| u.speaker).collect();
        Ok((ids, speakers))
    }

    pub fn forward_trace(&self, dialogue: &Dialogue) -> Result<ForwardTrace, DetectorError> {
        let (ids, speakers) = self.prepare(dialogue)?;
        let mut tape = Tape::new();
        tape.freeze(&self.store);
        let v = self.forward(&mut tape, &ids, &speakers);
        let probs = tape.softmax_rows(v.logits);
        Ok(ForwardTrace {
            utterances: tape.value(v.utterances).clone(),
            alpha: tape.value(v.alpha).clone(),
            sq: tape.value(v.sq).clone(),
            sp: tape.value(v.sp).clone(),
            features: tape.value(v.features).clone(),
            beta: tape.value(v.beta).clone(),
            pooled: tape.value(v.pooled).clone(),
            probs: tape.value(probs).clone(),
        })
    }

    /// Per-utterance label distributions, one row per utterance.
    pub fn predict(&self, dialogue: &Dialogue) -> Result<Mat, DetectorError> {
        Ok(self.forward_trace(dialogue)?.probs)
    }

    pub fn detect(&self, dialogue: &Dialogue) -> Result<EmotionStateSet, DetectorError> {
        let probs = self.predict(dialogue)?;
        Ok(EmotionStateSet((0..probs.rows()).map(|r| self.groups.label(argmax(probs.row(r))).clone()).collect()))
    }

    /// Detected emotions plus the target polarity they imply.
    pub fn detect_target(&self, dialogue: &Dialogue) -> Result<(EmotionStateSet, Polarity), DetectorError> {
        let emotions = self.detect(dialogue)?;
        let target = response_polarity(&emotions.0, &self.groups)?;
        Ok((emotions, target))
    }

    fn example(&self, dialogue: &Dialogue) -> Result<Example, DetectorError> {
        let (ids, speakers) = self.prepare(dialogue)?;
        let labels = dialogue
            .utterance_labels()
            .into_iter()
            .enumerate()
            .map(|(i, l)| {
                let l = l.ok_or_else(|| {
                    DetectorError::Config(format!("dialogue {} utterance {} has no emotion label", dialogue.id, i + 1))
                })?;
                Ok(self.groups.index_of(&l)?)
            })
            .collect::<Result<Vec<_>, DetectorError>>()?;
        Ok(Example { ids, speakers, labels })
    }

    /// Summed cross-entropy of one example, with its gradient added to `buf`.
    fn example_loss(&self, ex: &Example, buf: Option<&mut GradBuffer>) -> f64 {
        let mut tape = Tape::new();
        if buf.is_none() {
            tape.freeze(&self.store);
        }
        let v = self.forward(&mut tape, &ex.ids, &ex.speakers);
        let lp = tape.log_softmax_rows(v.logits);
        let loss = tape.nll(lp, &ex.labels);
        if let Some(buf) = buf {
            let grads = tape.backward(loss);
            buf.accumulate(&tape, &grads);
        }
        tape.value(loss).item()
    }

    /// Mean per-utterance cross-entropy plus `l2 * ‖θ‖²`.
    pub fn loss(&self, dialogues: &[Dialogue], l2: f64) -> Result<f64, DetectorError> {
        let examples = dialogues.iter().map(|d| self.example(d)).collect::<Result<Vec<_>, _>>()?;
        let count: usize = examples.iter().map(|e| e.labels.len()).sum();
        let ce: f64 = examples.iter().map(|e| self.example_loss(e, None)).sum();
        Ok(ce / count.max(1) as f64 + l2 * self.store.sum_sq())
    }

    /// [`DetectorModel::loss`] and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, dialogues: &[Dialogue], l2: f64) -> Result<(f64, GradBuffer), DetectorError> {
        let examples = dialogues.iter().map(|d| self.example(d)).collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&Example> = examples.iter().collect();
        Ok(self.batch_gradient(&refs, l2))
    }

    fn batch_gradient(&self, batch: &[&Example], l2: f64) -> (f64, GradBuffer) {
        let mut buf = GradBuffer::zeros_like(&self.store);
        let count: usize = batch.iter().map(|e| e.labels.len()).sum();
        let ce: f64 = batch.iter().map(|e| self.example_loss(e, Some(&mut buf))).sum();
        let scale = 1.0 / count.max(1) as f64;
        buf.scale(scale);
        buf.add_scaled_params(&self.store, 2.0 * l2);
        (ce * scale + l2 * self.store.sum_sq(), buf)
    }

    /// Fraction of utterances whose argmax label matches the gold label.
    pub fn accuracy(&self, dialogues: &[Dialogue]) -> Result<f64, DetectorError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for d in dialogues {
            let ex = self.example(d)?;
            let probs = self.predict(d)?;
            for (r, &gold) in ex.labels.iter().enumerate() {
                correct += usize::from(argmax(probs.row(r)) == gold);
                total += 1;
            }
        }
        if total == 0 {
            return Err(DetectorError::Precondition("accuracy over an empty set".into()));
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({ "config": self.config, "groups": self.groups, "vocab_size": self.vocab.len() });
        Checkpoint::from_store(CHECKPOINT_KIND, &self.vocab.compat_hash(), meta, &self.store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint, vocab: &Vocab) -> Result<Self, DetectorError> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        if ck.compat != vocab.compat_hash() {
            return Err(DetectorError::Config(format!(
                "checkpoint vocabulary hash {} differs from loaded vocabulary {}",
                ck.compat,
                vocab.compat_hash()
            )));
        }
        let config: DetectorConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| DetectorError::Checkpoint(CheckpointError::Header(e)))?;
        let groups: PolarityGroups = serde_json::from_value(ck.meta["groups"].clone())
            .map_err(|e| DetectorError::Checkpoint(CheckpointError::Header(e)))?;
        let mut model = Self::new(config, groups, vocab, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self, DetectorError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, vocab)
    }
}

/// Reads a word-per-line vector file (`word v1 v2 ...`) into a vocabulary-sized
/// table; words absent from the file keep the rows of `fallback`.
pub fn load_word_vectors(path: impl AsRef<Path>, vocab: &Vocab, fallback: &Mat) -> Result<Mat, DetectorError> {
    let path = path.as_ref();
    let err = |message: String| DetectorError::Embeddings { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    let mut table = fallback.clone();
    for (line_no, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(word) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| err(format!("line {}: {e}", line_no + 1)))?;
        if values.len() != table.cols() {
            // A leading "count dim" header line is tolerated.
            if line_no == 0 && values.len() == 1 {
                continue;
            }
            return Err(err(format!("line {}: {} values, expected {}", line_no + 1, values.len(), table.cols())));
        }
        if let Some(id) = vocab.get(word) {
            table.row_mut(id).copy_from_slice(&values);
        }
    }
    Ok(table)
}

/// Trains with Adam on mean cross-entropy plus L2, keeping the parameters of
/// the epoch with the best validation accuracy (the last epoch when `valid` is empty).
pub fn train_detector(
    train: &[Dialogue],
    valid: &[Dialogue],
    vocab: &Vocab,
    groups: PolarityGroups,
    config: DetectorConfig,
    tc: &DetectorTrainConfig,
) -> Result<(DetectorModel, Vec<EpochRecord>), DetectorError> {
    if train.is_empty() {
        return Err(DetectorError::Config("training set is empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(DetectorError::Config("batch_size must be positive".into()));
    }
    let mut model = DetectorModel::new(config, groups, vocab, tc.seed)?;
    if let Some(path) = &tc.pretrained_embeddings {
        let table = load_word_vectors(path, vocab, model.store.get(model.params.embedding))?;
        model.set_embeddings(table)?;
    }
    let examples = train.iter().map(|d| model.example(d)).collect::<Result<Vec<_>, _>>()?;
    for d in valid {
        model.example(d)?;
    }
    let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &model.store);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut log = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let batches = epoch_batches(examples.len(), tc.batch_size, tc.seed, epoch);
        let mut total = 0.0;
        for batch in &batches {
            let refs: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = model.batch_gradient(&refs, tc.l2);
            total += loss;
            adam.step(&mut model.store, &grads);
        }
        let valid_accuracy = if valid.is_empty() { None } else { Some(model.accuracy(valid)?) };
        log.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: total / batches.len() as f64,
            valid_loss: None,
            valid_accuracy,
        });
        if let Some(acc) = valid_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, model.store.clone()));
            }
            if tc.target_accuracy.is_some_and(|t| acc >= t) {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store.load_tensors(store.tensors().to_vec()).map_err(DetectorError::Config)?;
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use crate::text::tokenize;

    fn label(s: &str) -> EmotionLabel {
        EmotionLabel::new(s)
    }

    fn dialogue(texts: &[&str], labels: &[&str]) -> Dialogue {
        Dialogue {
            id: "t".into(),
            utterances: texts
                .iter()
                .zip(labels)
                .enumerate()
                .map(|(i, (t, l))| Utterance::new((i % 2) as u8, *t, Some(label(l))).unwrap())
                .collect(),
            dialogue_emotion: None,
        }
    }

    fn small_config() -> DetectorConfig {
        DetectorConfig { embed_dim: 6, filter_widths: vec![2, 3], filters: 4, gru_hidden: 3, graph_dim: 5, ffn_hidden: 6, ..Default::default() }
    }

    fn vocab() -> Vocab {
        Vocab::build([tokenize("yay grr hmm the cat sat on a mat").as_slice()], 1)
    }

    #[test]
    fn empathy_rule_examples() {
        let g = PolarityGroups::daily_dialog();
        let p = |ls: &[&str]| response_polarity(&ls.iter().map(|l| label(l)).collect::<Vec<_>>(), &g).unwrap();
        assert_eq!(p(&["happiness", "happiness", "sadness"]), Polarity::Positive);
        assert_eq!(p(&["happiness", "sadness"]), Polarity::Negative);
        assert_eq!(p(&["anger", "disgust", "fear"]), Polarity::Negative);
        assert!(matches!(response_polarity(&[], &g), Err(DetectorError::Precondition(_))));
    }

    #[test]
    fn edge_weight_examples() {
        let w = Mat::identity(2);
        let same = Mat::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let a = edge_weights(1, &same, GraphWindow { past: 2, future: 2 }, &w);
        for x in a {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let v = Mat::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5], vec![-0.7, 0.1]]);
        let a = edge_weights(0, &v, GraphWindow { past: 1, future: 1 }, &w);
        assert_eq!(a[2], 0.0);
        assert!(a[0] > 0.0 && a[1] > 0.0);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_weights_match_direct_computation() {
        let v = vocab();
        let model = DetectorModel::new(small_config(), PolarityGroups::daily_dialog(), &v, 3).unwrap();
        let d = dialogue(&["yay the cat", "grr", "the mat sat on a cat", "hmm"], &["happiness", "anger", "other", "other"]);
        let trace = model.forward_trace(&d).unwrap();
        for i in 0..4 {
            let direct = edge_weights(i, &trace.utterances, model.config.window, model.edge_matrix());
            for j in 0..4 {
                assert!((direct[j] - trace.alpha.get(i, j)).abs() < 1e-12);
            }
        }
        for r in 0..4 {
            assert!((trace.probs.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn single_utterance_and_identical_inputs() {
        let v = vocab();
        let model = DetectorModel::new(small_config(), PolarityGroups::daily_dialog(), &v, 1).unwrap();
        let d = dialogue(&["yay"], &["happiness"]);
        let t = model.forward_trace(&d).unwrap();
        assert_eq!(t.alpha.get(0, 0), 1.0);
        assert_eq!(t.probs.rows(), 1);
        let a = model.encode_utterance(&tokenize("the cat sat"));
        assert_eq!(a, model.encode_utterance(&tokenize("the cat sat")));
        assert_eq!(a.len(), small_config().utterance_dim());
    }

    #[test]
    fn uniform_head_breaks_ties_low() {
        let v = vocab();
        let mut model = DetectorModel::new(small_config(), PolarityGroups::daily_dialog(), &v, 1).unwrap();
        let out = model.params.ffn_out;
        *model.store.get_mut(out.weight) = Mat::zeros(6, 7);
        *model.store.get_mut(out.bias.unwrap()) = Mat::zeros(1, 7);
        let d = dialogue(&["grr", "grr", "grr", "grr"], &["anger"; 4]);
        let (emotions, target) = model.detect_target(&d).unwrap();
        assert_eq!(emotions.len(), 4);
        assert!(emotions.0.iter().all(|e| e.as_str() == "other"));
        assert_eq!(target, Polarity::Positive);
    }

    #[test]
    fn checkpoint_roundtrip_and_vocab_guard() {
        let v = vocab();
        let model = DetectorModel::new(small_config(), PolarityGroups::daily_dialog(), &v, 5).unwrap();
        let ck = Checkpoint::from_bytes(&model.to_checkpoint().to_bytes()).unwrap();
        let back = DetectorModel::from_checkpoint(&ck, &v).unwrap();
        assert_eq!(back.store, model.store);
        let other = Vocab::build([tokenize("different words").as_slice()], 1);
        assert!(DetectorModel::from_checkpoint(&ck, &other).is_err());
    }

    #[test]
    fn training_rejects_bad_input() {
        let v = vocab();
        let g = PolarityGroups::daily_dialog();
        assert!(matches!(
            train_detector(&[], &[], &v, g.clone(), small_config(), &DetectorTrainConfig::default()),
            Err(DetectorError::Config(_))
        ));
        let mut unlabeled = dialogue(&["yay"], &["happiness"]);
        unlabeled.utterances[0].emotion = None;
        assert!(train_detector(&[unlabeled], &[], &v, g, small_config(), &DetectorTrainConfig::default()).is_err());
    }

    #[test]
    fn word_vectors_override_known_rows() {
        let v = vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vec.txt");
        std::fs::write(&p, "2 2\nyay 1.0 2.0\nunseen 3 4\n").unwrap();
        let t = load_word_vectors(&p, &v, &Mat::zeros(v.len(), 2)).unwrap();
        assert_eq!(t.row(v.id("yay")), &[1.0, 2.0]);
        assert_eq!(t.sum(), 3.0);
        std::fs::write(&p, "yay 1.0\n").unwrap();
        assert!(load_word_vectors(&p, &v, &Mat::zeros(v.len(), 2)).is_ok());
        std::fs::write(&p, "yay 1.0 2.0 3.0\n").unwrap();
        assert!(load_word_vectors(&p, &v, &Mat::zeros(v.len(), 2)).is_err());
    }
}
