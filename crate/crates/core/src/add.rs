//! Add refiner: appends sentences of a target polarity by nudging the base
//! language model's key/value history toward what an attribute classifier
//! scores as that polarity, then sampling from a geometric mean of the
//! steered and original next-token distributions.

use crate::corpus::{LabeledSentence, Polarity};
use crate::generator::{mask_logits, sample_index};
use crate::lm::{LatentLanguageModel, Latents, LmError};
use crate::text::{TokenId, Vocab};
use emodial_nn::{log_softmax, Adam, AdamConfig, Checkpoint, CheckpointError, GradBuffer, Linear, Mat, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const CLASSIFIER_KIND: &str = "attribute-classifier";

#[derive(Debug, Error)]
pub enum AddError {
    #[error("invalid add configuration: {0}")]
    Config(String),
    #[error("steering produced a non-finite gradient")]
    NonFinite,
    #[error("add precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    pub num_steps: usize,
    pub step_size: f64,
    pub kl_coefficient: f64,
    /// Weight of the steered distribution in the fused one.
    pub fusion_gamma: f64,
    pub grad_norm_cap: f64,
    pub max_added_tokens: usize,
    /// A sentence end only stops generation once this many tokens were added.
    pub min_added_tokens: usize,
    pub sentence_end_tokens: Vec<String>,
    /// Next-token candidates (most probable under the base model) over which
    /// the attribute likelihood is marginalized.
    pub lookahead: usize,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            num_steps: 3,
            step_size: 0.02,
            kl_coefficient: 0.01,
            fusion_gamma: 0.9,
            grad_norm_cap: 1.0,
            max_added_tokens: 30,
            min_added_tokens: 3,
            sentence_end_tokens: vec![".".into(), "!".into(), "?".into()],
            lookahead: 10,
            seed: 0,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<(), AddError> {
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(AddError::Config(format!("step_size must be a nonnegative number, got {}", self.step_size)));
        }
        if !(self.kl_coefficient >= 0.0) {
            return Err(AddError::Config(format!("kl_coefficient must be nonnegative, got {}", self.kl_coefficient)));
        }
        if !(0.0..=1.0).contains(&self.fusion_gamma) {
            return Err(AddError::Config(format!("fusion_gamma must lie in [0, 1], got {}", self.fusion_gamma)));
        }
        if !(self.grad_norm_cap > 0.0) {
            return Err(AddError::Config(format!("grad_norm_cap must be positive, got {}", self.grad_norm_cap)));
        }
        if self.max_added_tokens == 0 {
            return Err(AddError::Config("max_added_tokens must be positive".into()));
        }
        if self.lookahead == 0 {
            return Err(AddError::Config("lookahead must be positive".into()));
        }
        Ok(())
    }
}

/// Linear head over mean-pooled language-model hidden states.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    store: ParamStore,
    head: Linear,
    dim: usize,
}

impl AttributeClassifier {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let head = Linear::new(&mut store, "head", dim, 2, &mut ChaCha8Rng::seed_from_u64(seed));
        Self { store, head, dim }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `log p(a | h)` for both classes as a 1 x 2 tape variable, weights frozen.
    pub fn log_probs_on_tape(&self, tape: &mut Tape, pooled: Var) -> Var {
        let w = tape.frozen_param(&self.store, self.head.weight);
        let mut logits = tape.matmul(pooled, w);
        if let Some(b) = self.head.bias {
            let b = tape.frozen_param(&self.store, b);
            logits = tape.add_row(logits, b);
        }
        tape.log_softmax_rows(logits)
    }

    pub fn log_probs(&self, pooled: &[f64]) -> [f64; 2] {
        let mut tape = Tape::new();
        let x = tape.constant(Mat::row_vector(pooled.to_vec()));
        let lp = self.log_probs_on_tape(&mut tape, x);
        let row = tape.value(lp).row(0);
        [row[0], row[1]]
    }

    pub fn predict(&self, pooled: &[f64]) -> Polarity {
        let lp = self.log_probs(pooled);
        if lp[1] > lp[0] {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    /// Mean-pooled hidden state of `tokens` read from the start.
    pub fn features(lm: &dyn LatentLanguageModel, tokens: &[String]) -> Result<Vec<f64>, AddError> {
        Ok(Self::suffix_features(lm, &[], tokens, false)?.pop().unwrap())
    }

    /// Pooled hidden states of `sentence` read after `context`, only the
    /// sentence positions pooled. With `prefixes` set, one feature row per
    /// non-empty prefix of the sentence, otherwise a single row.
    pub fn suffix_features(
        lm: &dyn LatentLanguageModel,
        context: &[String],
        sentence: &[String],
        prefixes: bool,
    ) -> Result<Vec<Vec<f64>>, AddError> {
        if sentence.is_empty() {
            return Err(AddError::Precondition("cannot pool an empty sentence".into()));
        }
        let mut ids = lm.vocab().encode(context);
        ids.extend(lm.vocab().encode(sentence));
        let ids = &ids[ids.len().saturating_sub(lm.max_positions())..];
        let hidden = lm.prefix_latents(ids)?.hidden;
        let start = ids.len().saturating_sub(sentence.len());
        let rows: Vec<&[f64]> = (start..ids.len()).map(|r| hidden.row(r)).collect();
        let pool = |k: usize| {
            let mut out = vec![0.0; hidden.cols()];
            for row in &rows[..k] {
                for (o, v) in out.iter_mut().zip(row.iter()) {
                    *o += v / k as f64;
                }
            }
            out
        };
        Ok(if prefixes { (1..=rows.len()).map(pool).collect() } else { vec![pool(rows.len())] })
    }

    pub fn classify(&self, lm: &dyn LatentLanguageModel, tokens: &[String]) -> Result<Polarity, AddError> {
        Ok(self.predict(&Self::features(lm, tokens)?))
    }

    /// Polarity of `sentence` as it reads after `context`.
    pub fn classify_suffix(&self, lm: &dyn LatentLanguageModel, context: &[String], sentence: &[String]) -> Result<Polarity, AddError> {
        Ok(self.predict(&Self::suffix_features(lm, context, sentence, false)?[0]))
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[Polarity]) -> f64 {
        let correct = features.iter().zip(labels).filter(|(f, &l)| self.predict(f) == l).count();
        correct as f64 / features.len().max(1) as f64
    }

    /// Full-batch logistic regression on precomputed pooled features.
    pub fn fit_features(&mut self, features: &[Vec<f64>], labels: &[Polarity], tc: &ClassifierTrainConfig) -> Vec<f64> {
        let mut adam = Adam::new(AdamConfig { lr: tc.lr, ..AdamConfig::default() }, &self.store);
        let x = Mat::from_rows(features);
        let targets: Vec<usize> = labels.iter().map(|p| p.index()).collect();
        let mut losses = Vec::with_capacity(tc.epochs);
        for _ in 0..tc.epochs {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let logits = self.head.forward(&mut tape, &self.store, xv);
            let lp = tape.log_softmax_rows(logits);
            let nll = tape.nll(lp, &targets);
            let loss = tape.scale(nll, 1.0 / targets.len() as f64);
            losses.push(tape.value(loss).item());
            let grads = tape.backward(loss);
            let mut buf = GradBuffer::zeros_like(&self.store);
            buf.accumulate(&tape, &grads);
            buf.add_scaled_params(&self.store, 2.0 * tc.l2);
            adam.step(&mut self.store, &buf);
        }
        losses
    }

    pub fn to_checkpoint(&self, compat: &str) -> Checkpoint {
        Checkpoint::from_store(CLASSIFIER_KIND, compat, serde_json::json!({ "dim": self.dim }), &self.store)
    }

    pub fn from_checkpoint(ck: &Checkpoint, compat: &str) -> Result<Self, AddError> {
        ck.expect_kind(CLASSIFIER_KIND)?;
        if ck.compat != compat {
            return Err(AddError::Config(format!("classifier was trained against {}, not {compat}", ck.compat)));
        }
        let dim = ck.meta["dim"].as_u64().ok_or_else(|| AddError::Config("classifier checkpoint lacks its dimension".into()))?;
        let mut c = Self::new(dim as usize, 0);
        ck.restore_into(&mut c.store)?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>, compat: &str) -> Result<(), AddError> {
        Ok(self.to_checkpoint(compat).save(path)?)
    }

    pub fn load(path: impl AsRef<Path>, compat: &str) -> Result<Self, AddError> {
        Self::from_checkpoint(&Checkpoint::load(path)?, compat)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    /// Also train on every prefix of each sentence, matching what the
    /// classifier sees while text is still being added.
    pub prefixes: bool,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 600, lr: 0.05, l2: 1e-5, prefixes: true, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub valid_accuracy: Option<f64>,
}

/// A sentence of known polarity, optionally read after some context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeExample {
    pub context: Vec<String>,
    pub sentence: Vec<String>,
    pub polarity: Polarity,
}

impl From<LabeledSentence> for AttributeExample {
    fn from(s: LabeledSentence) -> Self {
        Self { context: Vec::new(), sentence: s.tokens, polarity: s.polarity }
    }
}

/// Fits the classifier on pooled hidden states of each example's sentence.
/// Validation accuracy is measured on whole sentences.
pub fn train_attribute_classifier(
    train: &[AttributeExample],
    valid: &[AttributeExample],
    lm: &dyn LatentLanguageModel,
    tc: &ClassifierTrainConfig,
) -> Result<(AttributeClassifier, ClassifierReport), AddError> {
    for p in Polarity::ALL {
        if !train.iter().any(|s| s.polarity == p) {
            return Err(AddError::Config(format!("attribute corpus has no {p} sentences")));
        }
    }
    let featurize = |set: &[AttributeExample], prefixes: bool| -> Result<(Vec<Vec<f64>>, Vec<Polarity>), AddError> {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for e in set {
            for f in AttributeClassifier::suffix_features(lm, &e.context, &e.sentence, prefixes)? {
                feats.push(f);
                labels.push(e.polarity);
            }
        }
        Ok((feats, labels))
    };
    let (xf, xl) = featurize(train, tc.prefixes)?;
    let mut clf = AttributeClassifier::new(lm.hidden_dim(), tc.seed);
    let train_loss = clf.fit_features(&xf, &xl, tc);
    let (wf, wl) = featurize(train, false)?;
    let train_accuracy = clf.accuracy(&wf, &wl);
    let valid_accuracy = if valid.is_empty() {
        None
    } else {
        let (vf, vl) = featurize(valid, false)?;
        Some(clf.accuracy(&vf, &vl))
    };
    Ok((clf, ClassifierReport { train_loss, train_accuracy, valid_accuracy }))
}

/// Everything one steered decoding step needs: the unperturbed history,
/// the token about to be fed, and the running perturbation.
#[derive(Clone, Debug)]
pub struct SteeredState {
    /// Per-layer key/value history before `input`.
    pub keys: Vec<Mat>,
    pub values: Vec<Mat>,
    pub input: TokenId,
    pub position: usize,
    /// Hidden states of already-added tokens (pooled by the classifier).
    pub suffix_hidden: Vec<Vec<f64>>,
    /// Whether `input` itself belongs to the added text.
    pub input_in_suffix: bool,
    /// Unperturbed outputs of feeding `input`: its hidden state and the
    /// key/value rows it appends to the history.
    pub input_hidden: Vec<f64>,
    pub input_keys: Vec<Mat>,
    pub input_values: Vec<Mat>,
    /// Perturbations of `keys` and `values`.
    pub delta_keys: Vec<Mat>,
    pub delta_values: Vec<Mat>,
    /// Lookahead candidates and their pooled suffix features.
    pub candidates: Vec<TokenId>,
    pub candidate_features: Vec<Vec<f64>>,
    /// Log-probabilities of the unperturbed and steered next-token distributions.
    pub base: Vec<f64>,
    pub steered: Vec<f64>,
}

/// Value and gradient of the steering objective at the current perturbation.
#[derive(Clone, Debug)]
pub struct ObjectiveEval {
    pub objective: f64,
    pub attribute_log_prob: f64,
    pub kl: f64,
    /// Next-token log-probabilities under the perturbed history.
    pub steered: Vec<f64>,
    pub grad_keys: Vec<Mat>,
    pub grad_values: Vec<Mat>,
}

impl SteeredState {
    /// Runs the unperturbed step to obtain the base distribution, then reads
    /// each of the `lookahead` most probable next tokens to get the suffix
    /// features the classifier would see if that token were chosen.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        lm: &dyn LatentLanguageModel,
        keys: Vec<Mat>,
        values: Vec<Mat>,
        input: TokenId,
        position: usize,
        suffix_hidden: Vec<Vec<f64>>,
        input_in_suffix: bool,
        lookahead: usize,
    ) -> Self {
        let delta_keys: Vec<Mat> = keys.iter().map(|k| Mat::zeros(k.rows(), k.cols())).collect();
        let delta_values = delta_keys.clone();
        let mut tape = Tape::new();
        let past_k: Vec<Var> = keys.iter().map(|k| tape.constant(k.clone())).collect();
        let past_v: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let emb = lm.token_embeddings(&mut tape);
        let x = tape.gather_rows(emb, &[input]);
        let out = lm.step_on_tape(&mut tape, x, position, &past_k, &past_v);
        let base = log_softmax(tape.value(out.logits).row(0));
        let input_hidden = tape.value(out.hidden).row(0).to_vec();
        let input_keys: Vec<Mat> = out.keys.iter().map(|&k| tape.value(k).clone()).collect();
        let input_values: Vec<Mat> = out.values.iter().map(|&v| tape.value(v).clone()).collect();

        let mut pooled_prefix = suffix_hidden.clone();
        if input_in_suffix {
            pooled_prefix.push(input_hidden.clone());
        }
        let mut candidates = Vec::new();
        let mut candidate_features = Vec::new();
        if position + 1 < lm.max_positions() {
            let mut order: Vec<TokenId> = (0..base.len()).collect();
            order.sort_by(|&a, &b| base[b].total_cmp(&base[a]).then(a.cmp(&b)));
            order.truncate(lookahead);
            let next_k: Vec<Var> = (0..keys.len()).map(|l| tape.constant(stack(&keys[l], &input_keys[l]))).collect();
            let next_v: Vec<Var> = (0..values.len()).map(|l| tape.constant(stack(&values[l], &input_values[l]))).collect();
            for c in order {
                let x = tape.gather_rows(emb, &[c]);
                let step = lm.step_on_tape(&mut tape, x, position + 1, &next_k, &next_v);
                let mut rows = pooled_prefix.clone();
                rows.push(tape.value(step.hidden).row(0).to_vec());
                candidates.push(c);
                candidate_features.push(mean(&rows));
            }
        }
        Self {
            keys,
            values,
            input,
            position,
            suffix_hidden,
            input_in_suffix,
            input_hidden,
            input_keys,
            input_values,
            delta_keys,
            delta_values,
            candidates,
            candidate_features,
            steered: base.clone(),
            base,
        }
    }

    /// Objective and gradient at the state's current perturbation.
    pub fn objective(
        &self,
        lm: &dyn LatentLanguageModel,
        classifier: &AttributeClassifier,
        target: Polarity,
        kl_coefficient: f64,
    ) -> ObjectiveEval {
        self.evaluate(lm, classifier, target, kl_coefficient, &self.delta_keys, &self.delta_values)
    }

    /// `log p(a | x) - kl * KL(p' || p)` at perturbation `(dk, dv)`, with its
    /// gradient with respect to the perturbation.
    ///
    /// `p(a | x)` marginalizes the classifier over the lookahead candidates,
    /// weighted by the steered distribution renormalized over them. The
    /// candidates' features come from the unperturbed history, so the
    /// perturbation can only raise the attribute term by moving probability
    /// toward candidates the classifier scores as the target.
    pub fn evaluate(
        &self,
        lm: &dyn LatentLanguageModel,
        classifier: &AttributeClassifier,
        target: Polarity,
        kl_coefficient: f64,
        dk: &[Mat],
        dv: &[Mat],
    ) -> ObjectiveEval {
        let mut tape = Tape::new();
        let dk_vars: Vec<Var> = dk.iter().map(|d| tape.var(d.clone())).collect();
        let dv_vars: Vec<Var> = dv.iter().map(|d| tape.var(d.clone())).collect();
        let mut past_k = Vec::with_capacity(dk.len());
        let mut past_v = Vec::with_capacity(dv.len());
        for l in 0..self.keys.len() {
            let k = tape.constant(self.keys[l].clone());
            let v = tape.constant(self.values[l].clone());
            past_k.push(tape.add(k, dk_vars[l]));
            past_v.push(tape.add(v, dv_vars[l]));
        }
        let emb = lm.token_embeddings(&mut tape);
        let x = tape.gather_rows(emb, &[self.input]);
        let step = lm.step_on_tape(&mut tape, x, self.position, &past_k, &past_v);
        let log_p_steered = tape.log_softmax_rows(step.logits);

        let attribute = if self.candidates.is_empty() {
            let mut rows = self.suffix_hidden.clone();
            rows.push(self.input_hidden.clone());
            let lp = classifier.log_probs(&mean(&rows))[target.index()];
            tape.constant(Mat::scalar(lp))
        } else {
            let vocab_size = self.base.len();
            let mut select = Mat::zeros(vocab_size, self.candidates.len());
            for (j, &c) in self.candidates.iter().enumerate() {
                select.set(c, j, 1.0);
            }
            let select = tape.constant(select);
            let chosen = tape.matmul(log_p_steered, select);
            let weights = tape.softmax_rows(chosen);
            let likelihood: Vec<f64> =
                self.candidate_features.iter().map(|f| classifier.log_probs(f)[target.index()].exp()).collect();
            let likelihood = tape.constant(Mat::from_vec(likelihood.len(), 1, likelihood));
            let marginal = tape.matmul(weights, likelihood);
            tape.log(marginal)
        };

        let probs = tape.exp(log_p_steered);
        let base = tape.constant(Mat::row_vector(self.base.clone()));
        let ratio = tape.sub(log_p_steered, base);
        let weighted = tape.mul(probs, ratio);
        let kl = tape.sum(weighted);
        let penalty = tape.scale(kl, kl_coefficient);
        let objective = tape.sub(attribute, penalty);

        let mut grads = tape.backward(objective);
        let take = |grads: &mut emodial_nn::Grads, vars: &[Var], like: &[Mat]| -> Vec<Mat> {
            vars.iter().zip(like).map(|(&v, m)| grads.take(v).unwrap_or_else(|| Mat::zeros(m.rows(), m.cols()))).collect()
        };
        let grad_keys = take(&mut grads, &dk_vars, dk);
        let grad_values = take(&mut grads, &dv_vars, dv);
        ObjectiveEval {
            objective: tape.value(objective).item(),
            attribute_log_prob: tape.value(attribute).item(),
            kl: tape.value(kl).item(),
            steered: tape.value(log_p_steered).row(0).to_vec(),
            grad_keys,
            grad_values,
        }
    }
}

fn mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for row in rows {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v / rows.len() as f64;
        }
    }
    out
}

/// One gradient-ascent update of the perturbation,
/// `Δ += step_size * g / max(|g|, grad_norm_cap)` with `|g|` the global norm
/// over all layers. Gradients above the cap are normalized to unit length;
/// smaller ones shrink the step proportionally. Returns the objective
/// evaluated before the update.
pub fn steering_step(
    state: &mut SteeredState,
    lm: &dyn LatentLanguageModel,
    classifier: &AttributeClassifier,
    target: Polarity,
    config: &SteeringConfig,
) -> Result<ObjectiveEval, AddError> {
    let eval = state.objective(lm, classifier, target, config.kl_coefficient);
    let grads = eval.grad_keys.iter().chain(&eval.grad_values);
    if !grads.clone().all(Mat::is_finite) || !eval.objective.is_finite() {
        return Err(AddError::NonFinite);
    }
    let norm = grads.map(Mat::sum_sq).sum::<f64>().sqrt();
    let scale = config.step_size / norm.max(config.grad_norm_cap);
    for (d, g) in state.delta_keys.iter_mut().zip(&eval.grad_keys).chain(state.delta_values.iter_mut().zip(&eval.grad_values)) {
        for (a, b) in d.data_mut().iter_mut().zip(g.data()) {
            *a += scale * b;
        }
    }
    Ok(eval)
}

/// Post-norm geometric mean `p'^γ p^(1-γ)` of two log-distributions, returned as
/// probabilities. A zero exponent ignores its factor entirely, so γ = 0 gives `p`.
pub fn fused_distribution(base: &[f64], steered: &[f64], gamma: f64) -> Vec<f64> {
    let mix: Vec<f64> = base
        .iter()
        .zip(steered)
        .map(|(&b, &s)| {
            let from_steered = if gamma > 0.0 { gamma * s } else { 0.0 };
            let from_base = if gamma < 1.0 { (1.0 - gamma) * b } else { 0.0 };
            from_steered + from_base
        })
        .collect();
    emodial_nn::softmax(&mix)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    SentenceEnd,
    EndOfUtterance,
    MaxTokens,
    PositionLimit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenSteering {
    pub token: String,
    /// Classifier log-probability of the target before and after the updates.
    pub attribute_before: f64,
    pub attribute_after: f64,
    /// Set when steering failed and the token came from the base distribution.
    pub fallback: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddOutcome {
    /// Prototype followed by the added tokens.
    pub tokens: Vec<String>,
    pub added: Vec<String>,
    pub stop: StopReason,
    pub steps: Vec<TokenSteering>,
}

impl AddOutcome {
    pub fn fallbacks(&self) -> usize {
        self.steps.iter().filter(|s| s.fallback.is_some()).count()
    }
}

/// Extends `prototype` with steered tokens. The language model reads
/// `conditioning` followed by the prototype, truncated from the front so that
/// `max_added_tokens` positions remain, keeping at least half the window.
pub fn add_sentences(
    lm: &dyn LatentLanguageModel,
    classifier: &AttributeClassifier,
    conditioning: &[String],
    prototype: &[String],
    target: Polarity,
    config: &SteeringConfig,
) -> Result<AddOutcome, AddError> {
    config.validate()?;
    if classifier.dim() != lm.hidden_dim() {
        return Err(AddError::Config(format!("classifier dimension {} differs from the model's {}", classifier.dim(), lm.hidden_dim())));
    }
    let vocab: &Vocab = lm.vocab();
    let mut prefix: Vec<TokenId> = vocab.encode(conditioning);
    prefix.extend(vocab.encode(prototype));
    if prefix.is_empty() {
        return Err(AddError::Precondition("nothing to continue from".into()));
    }
    // Reserve room for the addition, but never more than half the window.
    let room = lm.max_positions().saturating_sub(config.max_added_tokens).max(lm.max_positions() / 2).max(1);
    let prefix = &prefix[prefix.len().saturating_sub(room)..];
    let ends: Vec<TokenId> = config.sentence_end_tokens.iter().filter_map(|t| vocab.get(t)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let history: Latents = if prefix.len() > 1 {
        lm.prefix_latents(&prefix[..prefix.len() - 1])?
    } else {
        Latents {
            keys: vec![Mat::zeros(0, lm.hidden_dim()); lm.layers()],
            values: vec![Mat::zeros(0, lm.hidden_dim()); lm.layers()],
            hidden: Mat::zeros(0, lm.hidden_dim()),
            logits: Vec::new(),
        }
    };
    let mut keys = history.keys;
    let mut values = history.values;
    let mut input = *prefix.last().unwrap();
    let mut position = prefix.len() - 1;
    let mut suffix_hidden: Vec<Vec<f64>> = Vec::new();
    let mut added: Vec<TokenId> = Vec::new();
    let mut steps = Vec::new();
    let stop = loop {
        if added.len() >= config.max_added_tokens {
            break StopReason::MaxTokens;
        }
        if position >= lm.max_positions() {
            break StopReason::PositionLimit;
        }
        let mut state =
            SteeredState::new(lm, keys.clone(), values.clone(), input, position, suffix_hidden.clone(), !added.is_empty(), config.lookahead);
        let mut before = f64::NAN;
        let mut fallback = None;
        for i in 0..config.num_steps {
            match steering_step(&mut state, lm, classifier, target, config) {
                Ok(eval) if i == 0 => before = eval.attribute_log_prob,
                Ok(_) => {}
                Err(e) => {
                    fallback = Some(e.to_string());
                    break;
                }
            }
        }
        let after = if config.num_steps > 0 && fallback.is_none() {
            let eval = state.objective(lm, classifier, target, config.kl_coefficient);
            if eval.steered.iter().all(|x| !x.is_nan()) {
                state.steered = eval.steered;
                eval.attribute_log_prob
            } else {
                fallback = Some("steered distribution is not finite".into());
                f64::NAN
            }
        } else {
            before
        };
        let steered = if fallback.is_some() { state.base.clone() } else { state.steered.clone() };
        let allow_end = added.len() >= config.min_added_tokens;
        let mut base = state.base.clone();
        let mut steered = steered;
        mask_logits(&mut base, vocab, allow_end);
        mask_logits(&mut steered, vocab, allow_end);
        let probs = fused_distribution(&base, &steered, config.fusion_gamma);
        let next = sample_index(&probs, &mut rng);
        if next == vocab.sep() {
            break StopReason::EndOfUtterance;
        }

        // Advance the unperturbed history by the consumed input.
        for l in 0..keys.len() {
            keys[l] = stack(&keys[l], &state.input_keys[l]);
            values[l] = stack(&values[l], &state.input_values[l]);
        }
        if !added.is_empty() {
            suffix_hidden.push(state.input_hidden.clone());
        }

        added.push(next);
        steps.push(TokenSteering { token: vocab.token(next).to_string(), attribute_before: before, attribute_after: after, fallback });
        input = next;
        position += 1;
        if ends.contains(&next) && added.len() >= config.min_added_tokens {
            break StopReason::SentenceEnd;
        }
    };
    let added = vocab.decode(&added);
    let mut tokens = prototype.to_vec();
    tokens.extend(added.iter().cloned());
    Ok(AddOutcome { tokens, added, stop, steps })
}

fn stack(a: &Mat, b: &Mat) -> Mat {
    let mut data = a.data().to_vec();
    data.extend_from_slice(b.data());
    Mat::from_vec(a.rows() + b.rows(), b.cols(), data)
}

/// Relative error between the analytic steering gradient and central finite
/// differences at `coords` (layer, is_value, flat index).
pub fn steering_gradient_check(
    state: &SteeredState,
    lm: &dyn LatentLanguageModel,
    classifier: &AttributeClassifier,
    target: Polarity,
    kl_coefficient: f64,
    coords: &[(usize, bool, usize)],
    h: f64,
) -> f64 {
    let eval = state.objective(lm, classifier, target, kl_coefficient);
    let mut worst: f64 = 0.0;
    for &(layer, is_value, idx) in coords {
        let shifted = |eps: f64| {
            let mut dk = state.delta_keys.clone();
            let mut dv = state.delta_values.clone();
            let target_mat = if is_value { &mut dv[layer] } else { &mut dk[layer] };
            target_mat.data_mut()[idx] += eps;
            state.evaluate(lm, classifier, target, kl_coefficient, &dk, &dv).objective
        };
        let numeric = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic = if is_value { eval.grad_values[layer].data()[idx] } else { eval.grad_keys[layer].data()[idx] };
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, TransformerLm};
    use crate::text::tokenize;

    fn setup() -> (Vocab, TransformerLm, AttributeClassifier) {
        let words = tokenize("the food is good bad . glad sorry to hear it");
        let vocab = Vocab::build([words.as_slice()], 1);
        let lm = TransformerLm::new(LmConfig { layers: 2, dim: 8, heads: 2, max_positions: 24, mlp_ratio: 2 }, &vocab, 3).unwrap();
        let clf = AttributeClassifier::new(8, 4);
        (vocab, lm, clf)
    }

    fn state_for(lm: &TransformerLm, vocab: &Vocab, text: &str) -> SteeredState {
        let ids = vocab.encode(&tokenize(text));
        let lat = lm.prefix_latents(&ids[..ids.len() - 1]).unwrap();
        SteeredState::new(lm, lat.keys, lat.values, *ids.last().unwrap(), ids.len() - 1, vec![vec![0.1; 8]], true, 5)
    }

    #[test]
    fn fusion_examples() {
        let p = [0.5f64.ln(), 0.5f64.ln()];
        let q = [0.9f64.ln(), 0.1f64.ln()];
        let f = fused_distribution(&p, &q, 0.5);
        assert!((f[0] - 0.75).abs() < 1e-12 && (f[1] - 0.25).abs() < 1e-12);
        assert!(fused_distribution(&p, &q, 0.0).iter().all(|x| (x - 0.5).abs() < 1e-15));
        let g = fused_distribution(&p, &q, 1.0);
        assert!((g[0] - 0.9).abs() < 1e-12);
        let masked = fused_distribution(&[f64::NEG_INFINITY, 0.0], &[0.0, f64::NEG_INFINITY], 0.0);
        assert_eq!(masked, vec![0.0, 1.0]);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (vocab, lm, clf) = setup();
        let mut state = state_for(&lm, &vocab, "the food is good . glad");
        let cfg = SteeringConfig { step_size: 0.05, ..Default::default() };
        steering_step(&mut state, &lm, &clf, Polarity::Positive, &cfg).unwrap();
        let coords: Vec<(usize, bool, usize)> = (0..12).map(|i| (i % 2, i % 3 == 0, (i * 7) % 40)).collect();
        let err = steering_gradient_check(&state, &lm, &clf, Polarity::Positive, 0.5, &coords, 1e-5);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_step_size_leaves_state() {
        let (vocab, lm, clf) = setup();
        let mut state = state_for(&lm, &vocab, "the food is");
        let cfg = SteeringConfig { step_size: 0.0, ..Default::default() };
        steering_step(&mut state, &lm, &clf, Polarity::Negative, &cfg).unwrap();
        assert!(state.delta_keys.iter().chain(&state.delta_values).all(|d| d.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn perturbation_bounded_by_steps_times_cap() {
        let (vocab, lm, clf) = setup();
        let mut state = state_for(&lm, &vocab, "the food is bad");
        let cfg = SteeringConfig { step_size: 0.3, grad_norm_cap: 0.5, ..Default::default() };
        for _ in 0..4 {
            steering_step(&mut state, &lm, &clf, Polarity::Positive, &cfg).unwrap();
        }
        let norm = state.delta_keys.iter().chain(&state.delta_values).map(Mat::sum_sq).sum::<f64>().sqrt();
        assert!(norm <= 4.0 * 0.3 + 1e-12);
    }

    #[test]
    fn disabled_steering_matches_plain_sampling() {
        let (_, lm, clf) = setup();
        let cfg = SteeringConfig { num_steps: 0, fusion_gamma: 0.0, max_added_tokens: 6, ..Default::default() };
        let proto = tokenize("the food is good .");
        let out = add_sentences(&lm, &clf, &[], &proto, Polarity::Positive, &cfg).unwrap();
        assert_eq!(&out.tokens[..proto.len()], proto.as_slice());

        // Replay with the plain language model and the same random stream.
        let vocab = crate::lm::LanguageModel::vocab(&lm);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ctx = vocab.encode(&proto);
        let mut replay = Vec::new();
        for _ in 0..out.added.len() {
            let mut lp = log_softmax(&crate::lm::LanguageModel::next_token_logits(&lm, &ctx).unwrap());
            mask_logits(&mut lp, vocab, replay.len() >= cfg.min_added_tokens);
            let next = sample_index(&emodial_nn::softmax(&lp), &mut rng);
            replay.push(vocab.token(next).to_string());
            ctx.push(next);
        }
        assert_eq!(replay, out.added);
    }

    #[test]
    fn single_token_budget() {
        let (_, lm, clf) = setup();
        let cfg = SteeringConfig { max_added_tokens: 1, ..Default::default() };
        let out = add_sentences(&lm, &clf, &[], &tokenize("the food"), Polarity::Positive, &cfg).unwrap();
        assert_eq!(out.added.len(), 1);
        assert_eq!(out.stop, StopReason::MaxTokens);
    }

    #[test]
    fn separable_features_and_zero_epochs() {
        let feats: Vec<Vec<f64>> = (0..40).map(|i| vec![if i % 2 == 0 { 1.0 } else { -1.0 }, (i as f64 * 0.37).sin()]).collect();
        let labels: Vec<Polarity> = (0..40).map(|i| if i % 2 == 0 { Polarity::Positive } else { Polarity::Negative }).collect();
        let mut c = AttributeClassifier::new(2, 0);
        let init = c.store().tensors().to_vec();
        c.fit_features(&feats, &labels, &ClassifierTrainConfig { epochs: 0, ..Default::default() });
        assert_eq!(c.store().tensors(), init.as_slice());
        c.fit_features(&feats, &labels, &ClassifierTrainConfig::default());
        assert_eq!(c.accuracy(&feats, &labels), 1.0);
        let back = AttributeClassifier::from_checkpoint(&c.to_checkpoint("x"), "x").unwrap();
        assert_eq!(back.log_probs(&[0.3, 0.2]), c.log_probs(&[0.3, 0.2]));
        assert!(AttributeClassifier::from_checkpoint(&c.to_checkpoint("x"), "y").is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        assert!(SteeringConfig { fusion_gamma: 1.5, ..Default::default() }.validate().is_err());
        assert!(SteeringConfig { max_added_tokens: 0, ..Default::default() }.validate().is_err());
    }
}
