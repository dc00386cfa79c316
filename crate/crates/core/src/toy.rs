//! A complete agent trained on the templated toy corpora. Used by the
//! acceptance suite, the CLI smoke tests and `emodial synth --train`.

use crate::add::{train_attribute_classifier, AttributeClassifier, ClassifierTrainConfig, SteeringConfig};
use crate::config::{ArtifactPaths, PipelineConfig};
use crate::corpus::{Dialogue, PolarityGroups};
use crate::detector::{train_detector, DetectorModel, DetectorConfig, DetectorTrainConfig};
use crate::eval::{BowJudge, JudgeTrainConfig};
use crate::generator::dialogue_sequences;
use crate::lm::{train_lm, TransformerLm, LmConfig, LmTrainConfig};
use crate::pipeline::{Agent, AgentParts};
use crate::rewrite::{train_rewriter, RewriteTrainConfig, Rewriter};
use crate::synthetic::{
    addition_examples, addition_sentences, lm_sentences, polarity_sentences, template_dialogues, template_split, Template,
};
use crate::text::Vocab;
use std::path::{Path, PathBuf};

/// How long to train each component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyScale {
    /// Enough training for the components to work as intended.
    Full,
    /// A few epochs each; the artifacts are valid but weak.
    Quick,
}

/// Template dialogues with 1 to 3 context utterances plus the response.
pub fn toy_dialogues(templates: &[Template], count: usize, seed: u64) -> Vec<Dialogue> {
    (1..=3usize).flat_map(|len| template_dialogues(templates, count / 3, len, seed.wrapping_add(len as u64))).collect()
}

/// Shared vocabulary over template sentences, additions and dialogue splicing.
pub fn toy_vocab() -> Vocab {
    let (train, test) = template_split(0);
    let mut sentences: Vec<Vec<String>> = polarity_sentences(&train).into_iter().map(|s| s.tokens).collect();
    sentences.extend(polarity_sentences(&test).into_iter().map(|s| s.tokens));
    sentences.extend(addition_sentences().into_iter().map(|s| s.tokens));
    Vocab::build(sentences.iter().map(|s| s.as_slice()), 1)
}

/// Configuration the toy stack is trained and run with.
pub fn toy_config(scale: ToyScale) -> PipelineConfig {
    let quick = scale == ToyScale::Quick;
    let mut c = PipelineConfig::default();
    c.detector = DetectorConfig { filters: 16, gru_hidden: 16, graph_dim: 32, ffn_hidden: 32, ..Default::default() };
    c.detector_train = DetectorTrainConfig { epochs: if quick { 1 } else { 6 }, target_accuracy: Some(0.99), ..Default::default() };
    c.lm = LmConfig { max_positions: 64, ..Default::default() };
    c.lm_train = LmTrainConfig { epochs: if quick { 1 } else { 10 }, ..Default::default() };
    c.rewriter_train = RewriteTrainConfig {
        extractor_epochs: if quick { 1 } else { 5 },
        generator_epochs: if quick { 1 } else { 20 },
        ..Default::default()
    };
    c.classifier_train = ClassifierTrainConfig { epochs: if quick { 50 } else { 600 }, ..Default::default() };
    c.add = SteeringConfig { step_size: 2.0, num_steps: 6, grad_norm_cap: 0.05, kl_coefficient: 0.01, ..Default::default() };
    if quick {
        c.add.num_steps = 1;
        c.add.max_added_tokens = 8;
    }
    // The add model is trained on single sentences, not spliced dialogues.
    c.run.add_reads_context = false;
    c
}

/// Every trained toy component, with the judge used to score them.
pub struct ToyArtifacts {
    pub config: PipelineConfig,
    pub vocab: Vocab,
    pub detector: DetectorModel,
    pub prototype_lm: TransformerLm,
    pub add_lm: TransformerLm,
    pub rewriter: Rewriter,
    pub classifier: AttributeClassifier,
    pub judge: BowJudge,
}

/// The toy agent plus the independent judge used to score it.
pub struct ToyStack {
    pub agent: Agent,
    pub judge: BowJudge,
    pub train_templates: Vec<Template>,
    pub test_templates: Vec<Template>,
}

/// Trains every component from scratch; deterministic.
pub fn train_toy_artifacts(scale: ToyScale) -> Result<ToyArtifacts, String> {
    let config = toy_config(scale);
    let (train_t, test_t) = template_split(0);
    let vocab = toy_vocab();
    let quick = scale == ToyScale::Quick;

    let dialogues = toy_dialogues(&train_t, if quick { 60 } else { 600 }, 11);
    let valid = toy_dialogues(&test_t, 60, 12);
    let (detector, _) = train_detector(
        &dialogues,
        &valid,
        &vocab,
        PolarityGroups::daily_dialog(),
        config.detector.clone(),
        &config.detector_train,
    )
    .map_err(|e| format!("detector: {e}"))?;

    let seqs = dialogue_sequences(&dialogues, &vocab);
    let (prototype_lm, _) =
        train_lm(&seqs, &vocab, config.lm.clone(), &config.lm_train).map_err(|e| format!("prototype model: {e}"))?;

    let add_text = lm_sentences(&train_t, if quick { 200 } else { 1500 }, 0.2, 1);
    let add_seqs: Vec<Vec<usize>> = add_text.iter().map(|s| vocab.encode(s)).collect();
    let (add_lm, _) = train_lm(&add_seqs, &vocab, config.lm.clone(), &config.lm_train).map_err(|e| format!("add model: {e}"))?;

    let (classifier, _) = train_attribute_classifier(
        &addition_examples(&train_t, 200, 7),
        &addition_examples(&test_t, 50, 8),
        &add_lm,
        &config.classifier_train,
    )
    .map_err(|e| format!("attribute classifier: {e}"))?;

    let polarity_train = polarity_sentences(&train_t);
    let polarity_test = polarity_sentences(&test_t);
    let (rewriter, _) = train_rewriter(
        &polarity_train,
        &polarity_test[..20],
        &vocab,
        config.extractor.clone(),
        config.generator.clone(),
        &config.rewriter_train,
    )
    .map_err(|e| format!("rewriter: {e}"))?;

    let mut judge_corpus = addition_sentences();
    judge_corpus.extend(polarity_train);
    let judge = BowJudge::train("toy-judge", &judge_corpus, &JudgeTrainConfig::default()).map_err(|e| format!("judge: {e}"))?;

    Ok(ToyArtifacts { config, vocab, detector, prototype_lm, add_lm, rewriter, classifier, judge })
}

impl ToyArtifacts {
    /// Saves every artifact under `dir/artifacts` and writes `dir/config.toml`
    /// pointing at them. Returns the config as loaded back from disk.
    pub fn save(&self, dir: &Path) -> Result<PipelineConfig, String> {
        let art = dir.join("artifacts");
        std::fs::create_dir_all(&art).map_err(|e| format!("{}: {e}", art.display()))?;
        let mut config = self.config.clone();
        let rel = |name: &str| PathBuf::from("artifacts").join(name);
        config.paths = ArtifactPaths {
            vocab: rel("vocab.txt"),
            detector: rel("detector.ckpt"),
            lm: rel("lm.ckpt"),
            add_lm: Some(rel("add_lm.ckpt")),
            mmi: None,
            extractor: rel("extractor.ckpt"),
            generator: rel("generator.ckpt"),
            classifier: rel("classifier.ckpt"),
            judge: Some(rel("judge.json")),
        };
        let at = |p: &Path| dir.join(p);
        let p = &config.paths;
        self.vocab.save(at(&p.vocab)).map_err(|e| e.to_string())?;
        self.detector.save(at(&p.detector)).map_err(|e| e.to_string())?;
        self.prototype_lm.save(at(&p.lm)).map_err(|e| e.to_string())?;
        self.add_lm.save(at(p.add_lm.as_ref().expect("set above"))).map_err(|e| e.to_string())?;
        self.rewriter.extractor.save(at(&p.extractor)).map_err(|e| e.to_string())?;
        self.rewriter.generator.save(at(&p.generator)).map_err(|e| e.to_string())?;
        self.classifier.save(at(&p.classifier), &self.vocab.compat_hash()).map_err(|e| e.to_string())?;
        self.judge.save(at(p.judge.as_ref().expect("set above"))).map_err(|e| e.to_string())?;
        let path = dir.join("config.toml");
        std::fs::write(&path, config.to_toml()).map_err(|e| format!("{}: {e}", path.display()))?;
        PipelineConfig::from_toml(&config.to_toml(), "config.toml", dir, Vec::new()).map_err(|e| e.to_string())
    }

    pub fn into_stack(self) -> Result<ToyStack, String> {
        let parts = AgentParts {
            vocab: self.vocab,
            detector: self.detector,
            prototype_lm: Box::new(self.prototype_lm),
            add_lm: Box::new(self.add_lm),
            mmi: None,
            rewriter: self.rewriter,
            classifier: self.classifier,
        };
        let agent = Agent::from_parts(self.config, parts).map_err(|e| e.to_string())?;
        let (train_templates, test_templates) = template_split(0);
        Ok(ToyStack { agent, judge: self.judge, train_templates, test_templates })
    }
}

pub fn build_toy_stack(scale: ToyScale) -> Result<ToyStack, String> {
    train_toy_artifacts(scale)?.into_stack()
}

/// Writes the toy corpora the CLI training commands consume:
/// `dialogues.jsonl`, `polarity.tsv`, `additions.tsv`, `add_text.txt` and `vocab.txt`.
pub fn write_toy_corpora(dir: &Path, scale: ToyScale) -> Result<(), String> {
    let (train_t, _) = template_split(0);
    let quick = scale == ToyScale::Quick;
    std::fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let io = |e: std::io::Error| e.to_string();
    crate::corpus::write_dialogues(dir.join("dialogues.jsonl"), &toy_dialogues(&train_t, if quick { 60 } else { 600 }, 11))
        .map_err(|e| e.to_string())?;
    crate::corpus::write_polarity_corpus(dir.join("polarity.tsv"), &polarity_sentences(&train_t)).map_err(|e| e.to_string())?;
    let additions: String = addition_examples(&train_t, if quick { 40 } else { 200 }, 7)
        .iter()
        .map(|e| format!("{}\t{}\t{}\n", e.context.join(" "), e.sentence.join(" "), e.polarity))
        .collect();
    std::fs::write(dir.join("additions.tsv"), additions).map_err(io)?;
    let text: String = lm_sentences(&train_t, if quick { 200 } else { 1500 }, 0.2, 1).iter().map(|s| s.join(" ") + "\n").collect();
    std::fs::write(dir.join("add_text.txt"), text).map_err(io)?;
    toy_vocab().save(dir.join("vocab.txt")).map_err(io)?;
    Ok(())
}
