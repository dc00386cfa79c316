//! Automatic evaluation: corpus BLEU-4, Dist-n, judge-based emotion accuracy,
//! and the paired prototype-versus-refined emotion comparison.

use crate::corpus::{LabeledSentence, Polarity};
use crate::selector::ResponseTrace;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use thiserror::Error;

/// Stand-in for a zero clipped n-gram count in BLEU.
pub const BLEU_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation input: {0}")]
    Input(String),
    #[error("judge file {path}: {message}")]
    Judge { path: String, message: String },
}

/// Multiset of the `n`-grams of `tokens`.
pub fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Matches of `hyp` n-grams against `reference`, each clipped by the reference count.
pub fn clipped_matches(hyp: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    hyp.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus BLEU over n = 1..4 with uniform weights and the brevity penalty.
/// A precision whose clipped match count is zero uses [`BLEU_EPSILON`] as
/// its numerator.
pub fn bleu4(hypotheses: &[Vec<String>], references: &[Vec<String>]) -> Result<f64, EvalError> {
    if hypotheses.len() != references.len() {
        return Err(EvalError::Input(format!("{} hypotheses but {} references", hypotheses.len(), references.len())));
    }
    if hypotheses.is_empty() {
        return Err(EvalError::Input("empty corpus".into()));
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (h, r) in hypotheses.iter().zip(references) {
            let hc = ngram_counts(h, n);
            matched += clipped_matches(&hc, &ngram_counts(r, n));
            total += h.len().saturating_sub(n - 1);
        }
        let numerator = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_sum += (numerator / total.max(1) as f64).ln() / 4.0;
    }
    let c: usize = hypotheses.iter().map(Vec::len).sum();
    let r: usize = references.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    Ok(bp * log_sum.exp())
}

/// Distinct `n`-grams over total `n`-grams across all hypotheses; 0 when there are none.
pub fn dist_n(hypotheses: &[Vec<String>], n: usize) -> Result<f64, EvalError> {
    if n == 0 {
        return Err(EvalError::Input("n must be at least 1".into()));
    }
    let mut distinct = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hypotheses {
        for w in h.windows(n) {
            distinct.insert(w);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { distinct.len() as f64 / total as f64 })
}

/// A sentence-level polarity classifier used to score generated text.
pub trait PolarityJudge {
    fn name(&self) -> &str;

    /// `[p(negative), p(positive)]`.
    fn probabilities(&self, tokens: &[String]) -> [f64; 2];

    fn polarity(&self, tokens: &[String]) -> Polarity {
        let p = self.probabilities(tokens);
        if p[1] > p[0] {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }
}

/// Binary bag-of-words logistic regression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowJudge {
    pub name: String,
    pub weights: BTreeMap<String, f64>,
    pub bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
}

impl Default for JudgeTrainConfig {
    fn default() -> Self {
        Self { epochs: 200, lr: 0.5, l2: 1e-4 }
    }
}

impl BowJudge {
    /// Full-batch gradient descent on the logistic loss.
    pub fn train(name: &str, corpus: &[LabeledSentence], config: &JudgeTrainConfig) -> Result<Self, EvalError> {
        for p in Polarity::ALL {
            if !corpus.iter().any(|s| s.polarity == p) {
                return Err(EvalError::Input(format!("judge corpus has no {p} sentences")));
            }
        }
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        for s in corpus {
            for t in &s.tokens {
                let next = index.len();
                index.entry(t.as_str()).or_insert(next);
            }
        }
        let features: Vec<Vec<usize>> = corpus
            .iter()
            .map(|s| {
                let mut f: Vec<usize> = s.tokens.iter().map(|t| index[t.as_str()]).collect();
                f.sort_unstable();
                f.dedup();
                f
            })
            .collect();
        let mut w = vec![0.0; index.len()];
        let mut b = 0.0;
        let n = corpus.len() as f64;
        for _ in 0..config.epochs {
            let mut gw = vec![0.0; w.len()];
            let mut gb = 0.0;
            for (f, s) in features.iter().zip(corpus) {
                let z = b + f.iter().map(|&i| w[i]).sum::<f64>();
                let err = sigmoid(z) - s.polarity.index() as f64;
                for &i in f {
                    gw[i] += err / n;
                }
                gb += err / n;
            }
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= config.lr * (g + 2.0 * config.l2 * *wi);
            }
            b -= config.lr * gb;
        }
        let weights = index.into_iter().map(|(t, i)| (t.to_string(), w[i])).collect();
        Ok(Self { name: name.to_string(), weights, bias: b })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let err = |message: String| EvalError::Judge { path: path.display().to_string(), message };
        let text = serde_json::to_string_pretty(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let err = |message: String| EvalError::Judge { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| err(e.to_string()))
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl PolarityJudge for BowJudge {
    fn name(&self) -> &str {
        &self.name
    }

    fn probabilities(&self, tokens: &[String]) -> [f64; 2] {
        let mut seen: Vec<&String> = tokens.iter().collect();
        seen.sort();
        seen.dedup();
        let z = self.bias + seen.iter().filter_map(|t| self.weights.get(t.as_str())).sum::<f64>();
        let p = sigmoid(z);
        [1.0 - p, p]
    }
}

/// Fraction of hypotheses the judge assigns their gold polarity.
pub fn emotion_accuracy(hypotheses: &[Vec<String>], gold: &[Polarity], judge: &dyn PolarityJudge) -> Result<f64, EvalError> {
    if hypotheses.len() != gold.len() {
        return Err(EvalError::Input(format!("{} hypotheses but {} gold labels", hypotheses.len(), gold.len())));
    }
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let correct = hypotheses.iter().zip(gold).filter(|(h, &g)| judge.polarity(h) == g).count();
    Ok(correct as f64 / hypotheses.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
    pub gold: Polarity,
    pub judged: Polarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub judge: String,
    pub bleu4: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub emotion_accuracy: f64,
    pub samples: Vec<SampleRecord>,
}

impl EvalReport {
    pub fn summary(&self) -> String {
        format!(
            "metric            value\nBLEU-4            {:.4}\nDist-1            {:.4}\nDist-2            {:.4}\nEmotion accuracy  {:.4}  (judge: {}, n = {})\n",
            self.bleu4,
            self.dist1,
            self.dist2,
            self.emotion_accuracy,
            self.judge,
            self.samples.len()
        )
    }
}

pub fn evaluate(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    gold: &[Polarity],
    judge: &dyn PolarityJudge,
) -> Result<EvalReport, EvalError> {
    if gold.len() != hypotheses.len() {
        return Err(EvalError::Input(format!("{} hypotheses but {} gold labels", hypotheses.len(), gold.len())));
    }
    let samples = hypotheses
        .iter()
        .zip(references)
        .zip(gold)
        .map(|((h, r), &g)| SampleRecord { hypothesis: h.clone(), reference: r.clone(), gold: g, judged: judge.polarity(h) })
        .collect();
    Ok(EvalReport {
        judge: judge.name().to_string(),
        bleu4: bleu4(hypotheses, references)?,
        dist1: dist_n(hypotheses, 1)?,
        dist2: dist_n(hypotheses, 2)?,
        emotion_accuracy: emotion_accuracy(hypotheses, gold, judge)?,
        samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub correct: bool,
    /// Judge probability of the target minus that of the other polarity.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSample {
    pub target: Polarity,
    pub prototype: Verdict,
    pub refined: Verdict,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub judge: String,
    pub samples: Vec<PairedSample>,
    pub prototype_correct: usize,
    pub refined_correct: usize,
    pub prototype_mean_margin: f64,
    pub refined_mean_margin: f64,
}

/// Judges prototype and final response of each trace against its target polarity.
pub fn compare_prototype_refined(traces: &[ResponseTrace], judge: &dyn PolarityJudge) -> ComparisonReport {
    let verdict = |tokens: &[String], target: Polarity| {
        let p = judge.probabilities(tokens);
        Verdict { correct: judge.polarity(tokens) == target, margin: p[target.index()] - p[target.flip().index()] }
    };
    let samples: Vec<PairedSample> = traces
        .iter()
        .map(|t| PairedSample { target: t.target, prototype: verdict(&t.prototype, t.target), refined: verdict(&t.response, t.target) })
        .collect();
    let n = samples.len().max(1) as f64;
    ComparisonReport {
        judge: judge.name().to_string(),
        prototype_correct: samples.iter().filter(|s| s.prototype.correct).count(),
        refined_correct: samples.iter().filter(|s| s.refined.correct).count(),
        prototype_mean_margin: samples.iter().map(|s| s.prototype.margin).sum::<f64>() / n,
        refined_mean_margin: samples.iter().map(|s| s.refined.margin).sum::<f64>() / n,
        samples,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn dist_examples() {
        assert!((dist_n(&[t("a a b")], 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(dist_n(&[t("a b"), t("a b")], 2).unwrap(), 0.5);
        assert_eq!(dist_n(&[t("a b c")], 1).unwrap(), 1.0);
        assert_eq!(dist_n(&[t("a")], 2).unwrap(), 0.0);
        assert!(dist_n(&[t("a")], 0).is_err());
    }

    #[test]
    fn bleu_examples() {
        let refs = vec![t("the cat sat on the mat"), t("a dog ran")];
        assert!((bleu4(&refs, &refs).unwrap() - 1.0).abs() < 1e-12);
        assert!(bleu4(&[], &[]).is_err());
        assert!(bleu4(&refs, &refs[..1]).is_err());
        // Unigrams 2/2, bigrams 1/1, no trigram or 4-gram; hypothesis shorter than reference.
        let b = bleu4(&[t("the cat")], &[t("the cat sat")]).unwrap();
        let expected = (1.0f64 - 1.5).exp() * (BLEU_EPSILON * BLEU_EPSILON).powf(0.25);
        assert!((b - expected).abs() < 1e-15);
    }

    #[test]
    fn judge_and_accuracy() {
        let corpus: Vec<LabeledSentence> = ["good food", "great show", "nice day"]
            .iter()
            .map(|s| LabeledSentence::new(s, Polarity::Positive))
            .chain(["bad food", "awful show", "poor day"].iter().map(|s| LabeledSentence::new(s, Polarity::Negative)))
            .collect();
        let judge = BowJudge::train("toy", &corpus, &JudgeTrainConfig::default()).unwrap();
        let hyps: Vec<Vec<String>> = corpus.iter().map(|s| s.tokens.clone()).collect();
        let gold: Vec<Polarity> = corpus.iter().map(|s| s.polarity).collect();
        assert_eq!(emotion_accuracy(&hyps, &gold, &judge).unwrap(), 1.0);
        let flipped: Vec<Polarity> = gold.iter().map(|p| p.flip()).collect();
        assert_eq!(emotion_accuracy(&hyps, &flipped, &judge).unwrap(), 0.0);
        let half: Vec<Polarity> = gold.iter().enumerate().map(|(i, p)| if i % 2 == 0 { p.flip() } else { *p }).collect();
        assert_eq!(emotion_accuracy(&hyps, &half, &judge).unwrap(), 0.5);
        assert!(BowJudge::train("x", &corpus[..3], &JudgeTrainConfig::default()).is_err());

        let dir = tempfile::tempdir().unwrap();
        judge.save(dir.path().join("j.json")).unwrap();
        assert_eq!(BowJudge::load(dir.path().join("j.json")).unwrap(), judge);
    }

    #[test]
    fn empty_comparison() {
        let judge = BowJudge { name: "none".into(), weights: BTreeMap::new(), bias: 0.0 };
        let r = compare_prototype_refined(&[], &judge);
        assert!(r.samples.is_empty());
        assert_eq!(r.refined_correct, 0);
    }
}
