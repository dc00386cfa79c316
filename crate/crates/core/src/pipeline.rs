//! The two-stage agent: sample a prototype, detect the target polarity, refine
//! the prototype by rewriting and by steered addition, keep the candidate
//! closest to the prototype.

use crate::add::{add_sentences, AttributeClassifier};
use crate::config::{ConfigError, PipelineConfig};
use crate::corpus::{Dialogue, Polarity, Utterance};
use crate::detector::DetectorModel;
use crate::generator::{concat_context, generate_prototype, generate_with_mmi, MmiScorer};
use crate::lm::{LanguageModel, LatentLanguageModel, TransformerLm};
use crate::rewrite::{Rewriter, SaliencyExtractor, StyledGenerator};
use crate::selector::{select, CandidateResponse, CandidateSource, ResponseTrace, TRACE_VERSION};
use crate::text::{detokenize, Vocab};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or unusable artifacts.
    #[error("configuration error: {0}")]
    Config(String),
    /// The request itself is invalid.
    #[error("invalid request: {field}: {message}")]
    Request { field: String, message: String },
    /// A pipeline stage failed at run time.
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        PipelineError::Config(e.to_string())
    }
}

impl PipelineError {
    fn request(field: impl Into<String>, message: impl Into<String>) -> Self {
        PipelineError::Request { field: field.into(), message: message.into() }
    }

    fn stage(stage: &'static str, e: impl std::fmt::Display) -> Self {
        PipelineError::Stage { stage, message: e.to_string() }
    }
}

/// Which refinement branches run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    NoAdd,
    NoRewrite,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "no_add" | "no-add" => Ok(Mode::NoAdd),
            "no_rewrite" | "no-rewrite" => Ok(Mode::NoRewrite),
            other => Err(format!("unknown mode `{other}` (expected full, no_add or no_rewrite)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestUtterance {
    /// Any label; the first label seen becomes speaker 0, the second speaker 1.
    pub speaker: String,
    pub text: String,
}

/// Body of `POST /respond`. Unknown fields are ignored.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RespondRequest {
    #[serde(default, rename = "v", skip_serializing_if = "Option::is_none")]
    pub version: Option<u32>,
    pub utterances: Vec<RequestUtterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
}

impl RespondRequest {
    /// Alternating speakers `user`/`agent`, starting with `user`.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let utterances = texts
            .iter()
            .enumerate()
            .map(|(i, t)| RequestUtterance { speaker: if i % 2 == 0 { "user" } else { "agent" }.into(), text: t.as_ref().into() })
            .collect();
        Self { version: Some(WIRE_VERSION), utterances, seed: None, mode: None }
    }

    /// Checks the request and turns it into a dialogue context.
    pub fn to_dialogue(&self, max_turns: usize) -> Result<Dialogue, PipelineError> {
        if let Some(v) = self.version {
            if v != WIRE_VERSION {
                return Err(PipelineError::request("v", format!("unsupported version {v} (expected {WIRE_VERSION})")));
            }
        }
        if self.utterances.is_empty() {
            return Err(PipelineError::request("utterances", "must contain at least one utterance"));
        }
        if self.utterances.len() > max_turns {
            return Err(PipelineError::request(
                "utterances",
                format!("{} utterances given, at most {max_turns} allowed", self.utterances.len()),
            ));
        }
        let mut names: Vec<&str> = Vec::new();
        let mut utterances = Vec::with_capacity(self.utterances.len());
        for (i, u) in self.utterances.iter().enumerate() {
            let speaker = match names.iter().position(|n| *n == u.speaker) {
                Some(s) => s,
                None if names.len() < 2 => {
                    names.push(&u.speaker);
                    names.len() - 1
                }
                None => return Err(PipelineError::request(format!("utterances[{i}].speaker"), "only two speakers are supported")),
            };
            if i > 0 && utterances.last().is_some_and(|p: &Utterance| p.speaker as usize == speaker) {
                return Err(PipelineError::request(format!("utterances[{i}].speaker"), "speakers must alternate"));
            }
            let utt = Utterance::new(speaker as u8, u.text.clone(), None)
                .ok_or_else(|| PipelineError::request(format!("utterances[{i}].text"), "has no tokens"))?;
            utterances.push(utt);
        }
        Ok(Dialogue { id: "request".into(), utterances, dialogue_emotion: None })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RespondResponse {
    pub v: u32,
    pub response: String,
    pub trace: ResponseTrace,
}

/// Identity of one loaded artifact, reported by `/health`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactVersion {
    pub name: String,
    pub compat: String,
    /// First 16 hex digits of the file's SHA-256; absent for in-memory parts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
}

/// The trained components the agent runs on.
pub struct AgentParts {
    pub vocab: Vocab,
    pub detector: DetectorModel,
    pub prototype_lm: Box<dyn LanguageModel + Send + Sync>,
    pub add_lm: Box<dyn LatentLanguageModel + Send + Sync>,
    pub mmi: Option<MmiScorer>,
    pub rewriter: Rewriter,
    pub classifier: AttributeClassifier,
}

pub struct Agent {
    config: PipelineConfig,
    parts: AgentParts,
    versions: Vec<ArtifactVersion>,
}

fn file_digest(path: &Path) -> Result<String, PipelineError> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

fn require(path: &Path, what: &str) -> Result<(), PipelineError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(PipelineError::Config(format!("{what} checkpoint not found: {}", path.display())))
    }
}

impl Agent {
    /// Loads every artifact named in `config.paths`; any missing or
    /// vocabulary-mismatched artifact is a configuration error.
    pub fn load(config: PipelineConfig) -> Result<Self, PipelineError> {
        let p = &config.paths;
        require(&p.vocab, "vocabulary")?;
        let vocab = Vocab::load(&p.vocab).map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", p.vocab.display())))?;
        let compat = vocab.compat_hash();
        let cfg = |what: &str, path: &Path, e: &dyn std::fmt::Display| PipelineError::Config(format!("{what} {}: {e}", path.display()));

        require(&p.detector, "detector")?;
        let detector = DetectorModel::load(&p.detector, &vocab).map_err(|e| cfg("detector", &p.detector, &e))?;
        require(&p.lm, "language model")?;
        let prototype_lm = TransformerLm::load(&p.lm, &vocab).map_err(|e| cfg("language model", &p.lm, &e))?;
        let add_path = p.add_lm.as_ref().unwrap_or(&p.lm);
        require(add_path, "add language model")?;
        let add_lm = TransformerLm::load(add_path, &vocab).map_err(|e| cfg("add language model", add_path, &e))?;
        let mmi = match &p.mmi {
            Some(path) => {
                require(path, "MMI scorer")?;
                Some(MmiScorer::load(path).map_err(|e| cfg("MMI scorer", path, &e))?)
            }
            None => None,
        };
        require(&p.extractor, "extractor")?;
        let extractor = SaliencyExtractor::load(&p.extractor, &vocab).map_err(|e| cfg("extractor", &p.extractor, &e))?;
        require(&p.generator, "generator")?;
        let generator = StyledGenerator::load(&p.generator, &vocab).map_err(|e| cfg("generator", &p.generator, &e))?;
        require(&p.classifier, "attribute classifier")?;
        let classifier = AttributeClassifier::load(&p.classifier, &compat).map_err(|e| cfg("attribute classifier", &p.classifier, &e))?;

        let mut versions = vec![ArtifactVersion { name: "vocab".into(), compat: compat.clone(), sha256: Some(file_digest(&p.vocab)?) }];
        let mut named = vec![
            ("detector", &p.detector),
            ("lm", &p.lm),
            ("add_lm", add_path),
            ("extractor", &p.extractor),
            ("generator", &p.generator),
            ("classifier", &p.classifier),
        ];
        if let Some(m) = &p.mmi {
            named.push(("mmi", m));
        }
        for (name, path) in named {
            versions.push(ArtifactVersion { name: name.into(), compat: compat.clone(), sha256: Some(file_digest(path)?) });
        }
        let parts = AgentParts {
            vocab,
            detector,
            prototype_lm: Box::new(prototype_lm),
            add_lm: Box::new(add_lm),
            mmi,
            rewriter: Rewriter { extractor, generator },
            classifier,
        };
        let mut agent = Self::from_parts(config, parts)?;
        agent.versions = versions;
        Ok(agent)
    }

    /// Assembles an agent from in-memory components that share one vocabulary.
    pub fn from_parts(config: PipelineConfig, parts: AgentParts) -> Result<Self, PipelineError> {
        let compat = parts.vocab.compat_hash();
        let checks = [
            ("detector", parts.detector.vocab().compat_hash()),
            ("lm", parts.prototype_lm.vocab().compat_hash()),
            ("add_lm", parts.add_lm.vocab().compat_hash()),
            ("extractor", parts.rewriter.extractor.vocab().compat_hash()),
            ("generator", parts.rewriter.generator.vocab().compat_hash()),
        ];
        for (name, hash) in &checks {
            if *hash != compat {
                return Err(PipelineError::Config(format!("{name} uses vocabulary {hash}, expected {compat}")));
            }
        }
        if parts.classifier.dim() != parts.add_lm.hidden_dim() {
            return Err(PipelineError::Config(format!(
                "attribute classifier dimension {} differs from the add model's {}",
                parts.classifier.dim(),
                parts.add_lm.hidden_dim()
            )));
        }
        config.decode.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        config.add.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut versions = vec![ArtifactVersion { name: "vocab".into(), compat: compat.clone(), sha256: None }];
        versions.extend(checks.iter().map(|(name, hash)| ArtifactVersion { name: (*name).into(), compat: hash.clone(), sha256: None }));
        versions.push(ArtifactVersion { name: "classifier".into(), compat: compat.clone(), sha256: None });
        Ok(Self { config, parts, versions })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn parts(&self) -> &AgentParts {
        &self.parts
    }

    pub fn versions(&self) -> &[ArtifactVersion] {
        &self.versions
    }

    /// Runs the full flow for one request. All decoding state is local, so
    /// concurrent calls do not interact.
    pub fn respond(&self, request: &RespondRequest) -> Result<RespondResponse, PipelineError> {
        let context = request.to_dialogue(self.config.run.max_turns)?;
        let seed = request.seed.unwrap_or(self.config.run.seed);
        let mode = request.mode.unwrap_or(self.config.run.mode);
        let trace = self.run(&context, seed, mode)?;
        Ok(RespondResponse { v: WIRE_VERSION, response: trace.response_text.clone(), trace })
    }

    /// Like [`Agent::respond`] for an already validated context.
    pub fn run(&self, context: &Dialogue, seed: u64, mode: Mode) -> Result<ResponseTrace, PipelineError> {
        let p = &self.parts;
        let mut notes = Vec::new();

        let mut decode = self.config.decode.clone();
        decode.seed = seed;
        let prototype = match (&p.mmi, self.config.run.use_mmi) {
            (Some(scorer), true) => generate_with_mmi(context, p.prototype_lm.as_ref(), scorer, &decode),
            _ => generate_prototype(context, p.prototype_lm.as_ref(), &decode),
        }
        .map_err(|e| PipelineError::stage("prototype", e))?
        .tokens;
        if prototype.is_empty() {
            return Err(PipelineError::stage("prototype", "empty prototype"));
        }

        let (emotions, target) = p.detector.detect_target(context).map_err(|e| PipelineError::stage("detect", e))?;

        let conditioning: Vec<String> =
            if self.config.run.add_reads_context { p.vocab.decode(&concat_context(context, &p.vocab)) } else { Vec::new() };
        let mut steering = self.config.add.clone();
        steering.seed = seed;
        let lambda = self.config.rewrite.lambda;

        let (rewritten, added) = std::thread::scope(|s| {
            let rewrite = (mode != Mode::NoRewrite).then(|| s.spawn(|| p.rewriter.rewrite(&prototype, target, lambda)));
            let add = (mode != Mode::NoAdd).then(|| {
                s.spawn(|| add_sentences(p.add_lm.as_ref(), &p.classifier, &conditioning, &prototype, target, &steering))
            });
            let panicked = "refinement branch panicked";
            (rewrite.map(|h| h.join().expect(panicked)), add.map(|h| h.join().expect(panicked)))
        });

        let mut deleted = Vec::new();
        let rewrite = match rewritten {
            None => {
                notes.push("rewrite: disabled".to_string());
                None
            }
            Some(Ok(outcome)) if !outcome.tokens.is_empty() => {
                deleted = prototype.iter().zip(&outcome.content.deleted).filter(|(_, d)| **d).map(|(t, _)| t.clone()).collect();
                Some(outcome.tokens)
            }
            Some(Ok(_)) => {
                notes.push("rewrite: fallback: empty output".to_string());
                None
            }
            Some(Err(e)) => {
                notes.push(format!("rewrite: fallback: {e}"));
                None
            }
        };
        let add = match added {
            None => {
                notes.push("add: disabled".to_string());
                None
            }
            Some(Ok(outcome)) => {
                let fallbacks = outcome.fallbacks();
                if fallbacks > 0 {
                    notes.push(format!("add: steering fallback on {fallbacks} of {} tokens", outcome.steps.len()));
                }
                Some(outcome.tokens)
            }
            Some(Err(e)) => {
                notes.push(format!("add: fallback: {e}"));
                None
            }
        };

        let score = |tokens: Vec<String>, source| {
            CandidateResponse::score(tokens, source, &prototype).map_err(|e| PipelineError::stage("select", e))
        };
        let rewrite = rewrite.map(|t| score(t, CandidateSource::Rewrite)).transpose()?;
        let add = add.map(|t| score(t, CandidateSource::Add)).transpose()?;
        let selected = match (&rewrite, &add) {
            (Some(r), Some(a)) => select(r, a, self.config.selector.tie),
            (Some(_), None) => CandidateSource::Rewrite,
            (None, Some(_)) => CandidateSource::Add,
            (None, None) => return Err(PipelineError::stage("select", "no refinement candidate survived")),
        };
        let response = match selected {
            CandidateSource::Rewrite => rewrite.as_ref(),
            CandidateSource::Add => add.as_ref(),
        }
        .expect("selected candidate exists")
        .tokens
        .clone();

        Ok(ResponseTrace {
            version: TRACE_VERSION,
            context: context.utterances.iter().map(|u| u.text.clone()).collect(),
            emotion_states: emotions.0.iter().map(|e| e.as_str().to_string()).collect(),
            target,
            prototype,
            rewrite,
            add,
            selected,
            response_text: detokenize(&response),
            response,
            deleted,
            notes,
        })
    }
}

/// One-line trace summary used by `chat`.
pub fn summarize(trace: &ResponseTrace) -> String {
    let gleu = |c: &Option<CandidateResponse>| c.as_ref().map_or("-".to_string(), |c| format!("{:.3}", c.gleu_vs_prototype));
    let target = match trace.target {
        Polarity::Positive => "positive",
        Polarity::Negative => "negative",
    };
    let mut line = format!(
        "emotions [{}] target {target} | prototype \"{}\" | rewrite {} add {} -> {}",
        trace.emotion_states.join(", "),
        detokenize(&trace.prototype),
        gleu(&trace.rewrite),
        gleu(&trace.add),
        trace.selected
    );
    for n in &trace.notes {
        line.push_str(&format!(" | {n}"));
    }
    line
}
