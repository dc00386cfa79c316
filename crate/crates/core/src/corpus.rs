//! Dialogue corpora: data model, dataset loaders, segmentation, splitting and
//! the emotion-to-polarity grouping.

use crate::text::tokenize;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

/// Schema version of the line-delimited dialogue store.
pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("`{label}` is not a label of the {taxonomy} taxonomy")]
    Taxonomy { label: String, taxonomy: String },
    #[error("invalid corpus configuration: {0}")]
    Config(String),
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub const ALL: [Polarity; 2] = [Polarity::Negative, Polarity::Positive];

    /// Class index used by every binary polarity head: negative 0, positive 1.
    pub fn index(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 1 {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Negative => "negative",
            Polarity::Positive => "positive",
        })
    }
}

impl FromStr for Polarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" | "pos" | "1" => Ok(Polarity::Positive),
            "negative" | "neg" | "0" => Ok(Polarity::Negative),
            other => Err(format!("unknown polarity `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmotionLabel(pub String);

impl EmotionLabel {
    pub fn new(name: impl Into<String>) -> Self {
        Self(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// DailyDialog emotion ids 0..=6, in dataset order.
pub const DAILYDIALOG_LABELS: [&str; 7] = ["other", "anger", "disgust", "fear", "happiness", "sadness", "surprise"];

const EMPATHETIC_POSITIVE: [&str; 13] = [
    "confident", "joyful", "grateful", "impressed", "proud", "excited", "trusting", "hopeful", "faithful", "prepared",
    "content", "surprised", "caring",
];

const EMPATHETIC_NEGATIVE: [&str; 19] = [
    "afraid", "angry", "annoyed", "anticipating", "anxious", "apprehensive", "ashamed", "devastated", "disappointed",
    "disgusted", "embarrassed", "furious", "guilty", "jealous", "lonely", "nostalgic", "sad", "sentimental", "terrified",
];

/// A closed emotion taxonomy together with its positive/negative grouping.
/// Label order defines the class index used by the emotion detector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityGroups {
    pub name: String,
    labels: Vec<EmotionLabel>,
    polarities: Vec<Polarity>,
}

impl PolarityGroups {
    pub fn new(name: impl Into<String>, entries: Vec<(EmotionLabel, Polarity)>) -> Result<Self, CorpusError> {
        let name = name.into();
        let mut seen = std::collections::HashSet::new();
        for (l, _) in &entries {
            if !seen.insert(l.clone()) {
                return Err(CorpusError::Config(format!("label `{l}` listed twice in taxonomy {name}")));
            }
        }
        if entries.is_empty() {
            return Err(CorpusError::Config(format!("taxonomy {name} is empty")));
        }
        let (labels, polarities) = entries.into_iter().unzip();
        Ok(Self { name, labels, polarities })
    }

    /// Seven DailyDialog emotions: happiness, surprise and "other" (no emotion)
    /// are positive; anger, disgust, fear and sadness are negative.
    pub fn daily_dialog() -> Self {
        let entries = DAILYDIALOG_LABELS
            .iter()
            .map(|&l| {
                let p = match l {
                    "happiness" | "surprise" | "other" => Polarity::Positive,
                    _ => Polarity::Negative,
                };
                (EmotionLabel::new(l), p)
            })
            .collect();
        Self::new("dailydialog", entries).expect("static taxonomy")
    }

    /// The 32 EmpatheticDialogues emotions (13 positive, 19 negative), alphabetical.
    pub fn empathetic() -> Self {
        let mut entries: Vec<(EmotionLabel, Polarity)> = EMPATHETIC_POSITIVE
            .iter()
            .map(|&l| (EmotionLabel::new(l), Polarity::Positive))
            .chain(EMPATHETIC_NEGATIVE.iter().map(|&l| (EmotionLabel::new(l), Polarity::Negative)))
            .collect();
        entries.sort();
        Self::new("empathetic", entries).expect("static taxonomy")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "dailydialog" => Some(Self::daily_dialog()),
            "empathetic" => Some(Self::empathetic()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[EmotionLabel] {
        &self.labels
    }

    pub fn label(&self, index: usize) -> &EmotionLabel {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &EmotionLabel) -> Result<usize, CorpusError> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| CorpusError::Taxonomy {
            label: label.0.clone(),
            taxonomy: self.name.clone(),
        })
    }

    pub fn parse(&self, name: &str) -> Result<EmotionLabel, CorpusError> {
        let label = EmotionLabel::new(name.trim());
        self.index_of(&label).map(|_| label)
    }

    pub fn polarity_at(&self, index: usize) -> Polarity {
        self.polarities[index]
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.polarities.iter().filter(|&&p| p == polarity).count()
    }
}

/// Deterministic lookup of a label's polarity.
pub fn map_polarity(label: &EmotionLabel, groups: &PolarityGroups) -> Result<Polarity, CorpusError> {
    groups.index_of(label).map(|i| groups.polarities[i])
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u8,
    pub text: String,
    pub tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emotion: Option<EmotionLabel>,
}

impl Utterance {
    /// Tokenizes `text`; `None` when it has no tokens.
    pub fn new(speaker: u8, text: impl Into<String>, emotion: Option<EmotionLabel>) -> Option<Self> {
        let text = text.into();
        let tokens = tokenize(&text);
        if tokens.is_empty() {
            return None;
        }
        Some(Self { speaker, text, tokens, emotion })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dialogue_emotion: Option<EmotionLabel>,
}

impl Dialogue {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Checks the structural invariants: at least one utterance, non-empty
    /// tokens, two speakers strictly alternating.
    pub fn validate(&self) -> Result<(), String> {
        if self.utterances.is_empty() {
            return Err(format!("dialogue {} has no utterances", self.id));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.tokens.is_empty() {
                return Err(format!("dialogue {} utterance {} is empty", self.id, i + 1));
            }
            if u.speaker > 1 {
                return Err(format!("dialogue {} uses speaker id {} (only 0 and 1 exist)", self.id, u.speaker));
            }
            if i > 0 && u.speaker == self.utterances[i - 1].speaker {
                return Err(format!("dialogue {} speakers do not alternate at utterance {}", self.id, i + 1));
            }
        }
        Ok(())
    }

    /// Per-utterance labels, falling back to the dialogue-level label when an
    /// utterance has none.
    pub fn utterance_labels(&self) -> Vec<Option<EmotionLabel>> {
        self.utterances.iter().map(|u| u.emotion.clone().or_else(|| self.dialogue_emotion.clone())).collect()
    }
}

/// Parses DailyDialog's published text format: one dialogue per line,
/// utterances terminated by `__eou__`; the parallel emotion file holds one
/// space-separated id per utterance.
pub fn load_dailydialog(text_path: impl AsRef<Path>, emotion_path: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    load_dailydialog_prefixed(text_path.as_ref(), emotion_path.as_ref(), "dd")
}

fn load_dailydialog_prefixed(text_path: &Path, emotion_path: &Path, prefix: &str) -> Result<Vec<Dialogue>, CorpusError> {
    let text = std::fs::read_to_string(text_path).map_err(|e| io_err(text_path, e))?;
    let emotions = std::fs::read_to_string(emotion_path).map_err(|e| io_err(emotion_path, e))?;
    let text_lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let emotion_lines: Vec<&str> = emotions.lines().filter(|l| !l.trim().is_empty()).collect();
    let fmt_err = |line: usize, message: String| CorpusError::Format {
        path: text_path.display().to_string(),
        line,
        message,
    };
    if text_lines.len() != emotion_lines.len() {
        return Err(fmt_err(
            text_lines.len().min(emotion_lines.len()) + 1,
            format!("{} dialogue lines but {} emotion lines", text_lines.len(), emotion_lines.len()),
        ));
    }
    let mut dialogues = Vec::with_capacity(text_lines.len());
    for (i, (t, e)) in text_lines.iter().zip(&emotion_lines).enumerate() {
        let line = i + 1;
        let pieces: Vec<&str> = t.split("__eou__").map(str::trim).filter(|p| !p.is_empty()).collect();
        let labels: Vec<&str> = e.split_whitespace().collect();
        if pieces.len() != labels.len() {
            return Err(fmt_err(line, format!("{} utterances but {} emotion labels", pieces.len(), labels.len())));
        }
        let mut utterances = Vec::with_capacity(pieces.len());
        for (k, (piece, label)) in pieces.iter().zip(&labels).enumerate() {
            let id: usize = label
                .parse()
                .ok()
                .filter(|&v: &usize| v < DAILYDIALOG_LABELS.len())
                .ok_or_else(|| fmt_err(line, format!("bad emotion id `{label}`")))?;
            let u = Utterance::new((k % 2) as u8, *piece, Some(EmotionLabel::new(DAILYDIALOG_LABELS[id])))
                .ok_or_else(|| fmt_err(line, format!("utterance {} has no tokens", k + 1)))?;
            utterances.push(u);
        }
        dialogues.push(Dialogue { id: format!("{prefix}-{line}"), utterances, dialogue_emotion: None });
    }
    Ok(dialogues)
}

/// Loads the official DailyDialog `train/`, `validation/` and `test/`
/// directories; dialogue ids are prefixed `train/`, `valid/` and `test/`.
pub fn load_dailydialog_official(root: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    let root = root.as_ref();
    let mut all = Vec::new();
    for (dir, prefix) in [("train", "train/dd"), ("validation", "valid/dd"), ("test", "test/dd")] {
        let text: PathBuf = root.join(dir).join(format!("dialogues_{dir}.txt"));
        let emotion: PathBuf = root.join(dir).join(format!("dialogues_emotion_{dir}.txt"));
        all.extend(load_dailydialog_prefixed(&text, &emotion, prefix)?);
    }
    Ok(all)
}

/// Parses the EmpatheticDialogues CSV (`conv_id, utterance_idx, context,
/// prompt, speaker_idx, utterance, ...`). Rows of one conversation are
/// contiguous; the `context` column carries the dialogue-level emotion.
pub fn load_empathetic(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    let path = path.as_ref();
    let groups = PolarityGroups::empathetic();
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .quoting(false)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => io_err(path, io),
            other => CorpusError::Format { path: path.display().to_string(), line: 1, message: format!("{other:?}") },
        })?;
    let fmt_err = |line: usize, message: String| CorpusError::Format {
        path: path.display().to_string(),
        line,
        message,
    };
    let headers = reader.headers().map_err(|e| fmt_err(1, e.to_string()))?.clone();
    if headers.is_empty() || headers.iter().all(|h| h.trim().is_empty()) {
        return Ok(Vec::new());
    }
    let col = |name: &str| {
        headers.iter().position(|h| h.trim() == name).ok_or_else(|| fmt_err(1, format!("missing column `{name}`")))
    };
    let (c_conv, c_ctx, c_utt) = (col("conv_id")?, col("context")?, col("utterance")?);

    let mut dialogues: Vec<Dialogue> = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| fmt_err(line, e.to_string()))?;
        let field = |c: usize| record.get(c).map(str::trim).ok_or_else(|| fmt_err(line, format!("missing field {}", c + 1)));
        let conv = field(c_conv)?;
        let emotion = groups.parse(field(c_ctx)?).map_err(|e| fmt_err(line, e.to_string()))?;
        let text = field(c_utt)?.replace("_comma_", ",");
        let new_conv = dialogues.last().is_none_or(|d| d.id != conv);
        if new_conv {
            dialogues.push(Dialogue { id: conv.to_string(), utterances: Vec::new(), dialogue_emotion: Some(emotion.clone()) });
        }
        let dialogue = dialogues.last_mut().expect("pushed above");
        if dialogue.dialogue_emotion.as_ref() != Some(&emotion) {
            return Err(fmt_err(line, format!("conversation {conv} changes emotion label")));
        }
        let speaker = (dialogue.utterances.len() % 2) as u8;
        let u = Utterance::new(speaker, text, None).ok_or_else(|| fmt_err(line, "utterance has no tokens".into()))?;
        dialogue.utterances.push(u);
    }
    Ok(dialogues)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmentation {
    pub dialogues: Vec<Dialogue>,
    /// Input dialogues shorter than the window.
    pub dropped: usize,
}

/// Every contiguous stride-1 window of `rounds` utterances.
pub fn segment_dialogues(dialogues: &[Dialogue], rounds: usize) -> Result<Segmentation, CorpusError> {
    if rounds < 2 {
        return Err(CorpusError::Config(format!("rounds must be at least 2, got {rounds}")));
    }
    let mut out = Vec::new();
    let mut dropped = 0;
    for d in dialogues {
        if d.utterances.len() < rounds {
            dropped += 1;
            continue;
        }
        for start in 0..=d.utterances.len() - rounds {
            let mut utterances = d.utterances[start..start + rounds].to_vec();
            // Re-base speakers so every window starts with speaker 0.
            let first = utterances[0].speaker;
            for u in &mut utterances {
                u.speaker ^= first;
            }
            out.push(Dialogue {
                id: format!("{}#{}", d.id, start + 1),
                utterances,
                dialogue_emotion: d.dialogue_emotion.clone(),
            });
        }
    }
    Ok(Segmentation { dialogues: out, dropped })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SplitSpec {
    /// Random partition with the given proportions; sizes by largest remainder.
    Ratios { train: f64, valid: f64, test: f64, seed: u64 },
    /// Partition by the `train/`, `valid/`, `test/` id prefixes that
    /// [`load_dailydialog_official`] assigns.
    Official,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

/// Floors each share and hands the remaining units to the largest fractional
/// parts, earliest first on ties.
fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        sizes[i] += 1;
    }
    sizes
}

pub fn split_corpus(dialogues: Vec<Dialogue>, spec: &SplitSpec) -> Result<Splits, CorpusError> {
    match *spec {
        SplitSpec::Ratios { train, valid, test, seed } => {
            let ratios = [train, valid, test];
            if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(CorpusError::Config(format!("split ratios {ratios:?} must be in [0, 1] and sum to 1")));
            }
            let sizes = largest_remainder(dialogues.len(), &ratios);
            let mut order: Vec<usize> = (0..dialogues.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut slots: Vec<Option<Dialogue>> = dialogues.into_iter().map(Some).collect();
            let mut take = |idx: &[usize]| idx.iter().map(|&i| slots[i].take().expect("index used once")).collect();
            let train = take(&order[..sizes[0]]);
            let valid = take(&order[sizes[0]..sizes[0] + sizes[1]]);
            let test = take(&order[sizes[0] + sizes[1]..]);
            Ok(Splits { train, valid, test })
        }
        SplitSpec::Official => {
            let mut splits = Splits::default();
            for d in dialogues {
                if d.id.starts_with("train/") {
                    splits.train.push(d);
                } else if d.id.starts_with("valid/") {
                    splits.valid.push(d);
                } else if d.id.starts_with("test/") {
                    splits.test.push(d);
                } else {
                    return Err(CorpusError::Config(format!("dialogue {} carries no official split prefix", d.id)));
                }
            }
            Ok(splits)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StoredDialogue {
    v: u32,
    #[serde(flatten)]
    dialogue: Dialogue,
}

/// Writes one JSON dialogue object per line.
pub fn write_dialogues(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in dialogues {
        let rec = StoredDialogue { v: STORE_VERSION, dialogue: d.clone() };
        serde_json::to_writer(&mut w, &rec).expect("dialogue serializes");
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_dialogues(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, CorpusError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: StoredDialogue = serde_json::from_str(&line).map_err(|e| CorpusError::Format {
            path: path.display().to_string(),
            line: line_no,
            message: e.to_string(),
        })?;
        if rec.v != STORE_VERSION {
            return Err(CorpusError::Format {
                path: path.display().to_string(),
                line: line_no,
                message: format!("unsupported store version {}", rec.v),
            });
        }
        out.push(rec.dialogue);
    }
    Ok(out)
}

/// A polarity-labelled sentence for the refiners (not necessarily dialogue text).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub polarity: Polarity,
}

impl LabeledSentence {
    pub fn new(text: &str, polarity: Polarity) -> Self {
        Self { tokens: tokenize(text), polarity }
    }
}

/// Reads `text<TAB>polarity` lines.
pub fn read_polarity_corpus(path: impl AsRef<Path>) -> Result<Vec<LabeledSentence>, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |message: String| CorpusError::Format { path: path.display().to_string(), line: i + 1, message };
        let (sentence, label) = line.rsplit_once('\t').ok_or_else(|| fmt_err("expected `text<TAB>polarity`".into()))?;
        let polarity = label.parse::<Polarity>().map_err(fmt_err)?;
        let s = LabeledSentence::new(sentence, polarity);
        if s.tokens.is_empty() {
            return Err(fmt_err("sentence has no tokens".into()));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn write_polarity_corpus(path: impl AsRef<Path>, corpus: &[LabeledSentence]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in corpus {
        text.push_str(&s.tokens.join(" "));
        text.push('\t');
        text.push_str(&s.polarity.to_string());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Label histogram, handy for corpus reports.
pub fn label_counts(dialogues: &[Dialogue]) -> HashMap<EmotionLabel, usize> {
    let mut counts = HashMap::new();
    for d in dialogues {
        for l in d.utterance_labels().into_iter().flatten() {
            *counts.entry(l).or_default() += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dialogue(id: &str, n: usize) -> Dialogue {
        Dialogue {
            id: id.to_string(),
            utterances: (0..n).map(|i| Utterance::new((i % 2) as u8, format!("utterance {i}"), None).unwrap()).collect(),
            dialogue_emotion: None,
        }
    }

    fn write(dir: &tempfile::TempDir, name: &str, contents: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p).unwrap().write_all(contents.as_bytes()).unwrap();
        p
    }

    #[test]
    fn dailydialog_two_utterances() {
        let dir = tempfile::tempdir().unwrap();
        let text = write(&dir, "t.txt", "Hi , how are you ? __eou__ Fine . __eou__\n");
        let emo = write(&dir, "e.txt", "4 0\n");
        let ds = load_dailydialog(&text, &emo).unwrap();
        // Independent split of the fixture line.
        let expected: Vec<&str> = "Hi , how are you ? __eou__ Fine . __eou__"
            .split("__eou__")
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds[0].utterances.len(), expected.len());
        assert_eq!(ds[0].utterances[0].text, expected[0]);
        let labels: Vec<_> = ds[0].utterances.iter().map(|u| u.emotion.clone().unwrap().0).collect();
        assert_eq!(labels, vec!["happiness", "other"]);
        assert_eq!(ds[0].utterances[1].speaker, 1);
        ds[0].validate().unwrap();
    }

    #[test]
    fn dailydialog_empty_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let t = write(&dir, "t.txt", "");
        let e = write(&dir, "e.txt", "");
        assert!(load_dailydialog(&t, &e).unwrap().is_empty());

        let t = write(&dir, "t2.txt", "a __eou__ b __eou__\nc __eou__\n");
        let e = write(&dir, "e2.txt", "0 0\n0 1\n");
        match load_dailydialog(&t, &e) {
            Err(CorpusError::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
        assert!(matches!(load_dailydialog(dir.path().join("missing"), &e), Err(CorpusError::Io { .. })));
    }

    #[test]
    fn empathetic_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let csv = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags\n\
                   hit:0_conv:1,1,joyful,I got a job,1,I got the job_comma_ finally!,5|5|5_2|2|5,\n\
                   hit:0_conv:1,2,joyful,I got a job,0,Congrats!,5|5|5_2|2|5,\n\
                   hit:1_conv:2,1,afraid,Dark,3,I heard a noise downstairs.,,\n";
        let p = write(&dir, "ed.csv", csv);
        let ds = load_empathetic(&p).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds[0].dialogue_emotion.as_ref().unwrap().as_str(), "joyful");
        assert_eq!(ds[0].utterances[0].text, "I got the job, finally!");
        assert!(ds[0].utterances.iter().all(|u| u.emotion.is_none()));
        let groups = PolarityGroups::empathetic();
        assert_eq!(map_polarity(ds[1].dialogue_emotion.as_ref().unwrap(), &groups).unwrap(), Polarity::Negative);

        let bad = write(&dir, "bad.csv", "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\nc,1,elated,p,0,hi\n");
        assert!(matches!(load_empathetic(&bad), Err(CorpusError::Format { line: 2, .. })));
        let empty = write(&dir, "empty.csv", "");
        assert!(load_empathetic(&empty).unwrap().is_empty());
    }

    #[test]
    fn polarity_tables() {
        let dd = PolarityGroups::daily_dialog();
        assert_eq!((dd.count(Polarity::Positive), dd.count(Polarity::Negative)), (3, 4));
        let ed = PolarityGroups::empathetic();
        assert_eq!((ed.count(Polarity::Positive), ed.count(Polarity::Negative)), (13, 19));
        assert_eq!(map_polarity(&EmotionLabel::new("happiness"), &dd).unwrap(), Polarity::Positive);
        assert_eq!(map_polarity(&EmotionLabel::new("sadness"), &dd).unwrap(), Polarity::Negative);
        assert_eq!(map_polarity(&EmotionLabel::new("other"), &dd).unwrap(), Polarity::Positive);
        assert_eq!(map_polarity(&EmotionLabel::new("lonely"), &ed).unwrap(), Polarity::Negative);
        assert!(matches!(map_polarity(&EmotionLabel::new("lonely"), &dd), Err(CorpusError::Taxonomy { .. })));
        for groups in [dd, ed] {
            for l in groups.labels() {
                map_polarity(l, &groups).unwrap();
            }
        }
    }

    #[test]
    fn segmentation_windows() {
        let seg = segment_dialogues(&[dialogue("a", 6)], 4).unwrap();
        assert_eq!(seg.dialogues.len(), 3);
        assert_eq!(seg.dialogues[1].utterances[0].text, "utterance 1");
        assert_eq!(seg.dialogues[2].utterances[3].text, "utterance 5");
        for d in &seg.dialogues {
            d.validate().unwrap();
            assert_eq!(d.utterances[0].speaker, 0);
        }
        let seg = segment_dialogues(&[dialogue("b", 3)], 4).unwrap();
        assert!(seg.dialogues.is_empty());
        assert_eq!(seg.dropped, 1);
        assert!(segment_dialogues(&[], 1).is_err());
    }

    #[test]
    fn ratio_split_sizes_and_determinism() {
        let ds: Vec<Dialogue> = (0..10).map(|i| dialogue(&i.to_string(), 2)).collect();
        let spec = SplitSpec::Ratios { train: 0.8, valid: 0.1, test: 0.1, seed: 7 };
        let a = split_corpus(ds.clone(), &spec).unwrap();
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        let b = split_corpus(ds.clone(), &spec).unwrap();
        assert_eq!(a, b);
        let bad = SplitSpec::Ratios { train: 0.8, valid: 0.3, test: 0.1, seed: 7 };
        assert!(matches!(split_corpus(ds, &bad), Err(CorpusError::Config(_))));
    }

    #[test]
    fn official_split_uses_prefixes() {
        let ds = vec![dialogue("train/dd-1", 2), dialogue("test/dd-1", 2), dialogue("valid/dd-1", 2)];
        let s = split_corpus(ds, &SplitSpec::Official).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (1, 1, 1));
        assert!(split_corpus(vec![dialogue("x", 2)], &SplitSpec::Official).is_err());
    }

    #[test]
    fn polarity_corpus_io() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = vec![LabeledSentence::new("the food is good .", Polarity::Positive), LabeledSentence::new("awful", Polarity::Negative)];
        let p = dir.path().join("c.tsv");
        write_polarity_corpus(&p, &corpus).unwrap();
        assert_eq!(read_polarity_corpus(&p).unwrap(), corpus);
        let bad = write(&dir, "bad.tsv", "no tab here\n");
        assert!(read_polarity_corpus(&bad).is_err());
    }

    fn arb_dialogue() -> impl Strategy<Value = Dialogue> {
        (
            "[a-z]{1,6}",
            prop::collection::vec(("[a-z]{1,5}( [a-z]{1,5}){0,3}", prop::option::of(0usize..7)), 1..6),
            prop::option::of(0usize..7),
        )
            .prop_map(|(id, utts, de)| Dialogue {
                id,
                utterances: utts
                    .into_iter()
                    .enumerate()
                    .map(|(i, (t, e))| {
                        Utterance::new((i % 2) as u8, t, e.map(|k| EmotionLabel::new(DAILYDIALOG_LABELS[k]))).unwrap()
                    })
                    .collect(),
                dialogue_emotion: de.map(|k| EmotionLabel::new(DAILYDIALOG_LABELS[k])),
            })
    }

    proptest! {
        #[test]
        fn segmentation_count_law(lengths in prop::collection::vec(1usize..12, 0..10), rounds in 2usize..6) {
            let ds: Vec<Dialogue> = lengths.iter().enumerate().map(|(i, &n)| dialogue(&i.to_string(), n)).collect();
            let seg = segment_dialogues(&ds, rounds).unwrap();
            let expected: usize = lengths.iter().map(|&n| (n + 1).saturating_sub(rounds)).sum();
            prop_assert_eq!(seg.dialogues.len(), expected);
            prop_assert!(seg.dialogues.iter().all(|d| d.utterances.len() == rounds));
        }

        #[test]
        fn store_roundtrip(ds in prop::collection::vec(arb_dialogue(), 0..5)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("d.jsonl");
            write_dialogues(&p, &ds).unwrap();
            prop_assert_eq!(read_dialogues(&p).unwrap(), ds);
        }

        #[test]
        fn ratio_split_partitions(n in 0usize..40, seed in any::<u64>()) {
            let ds: Vec<Dialogue> = (0..n).map(|i| dialogue(&i.to_string(), 2)).collect();
            let s = split_corpus(ds, &SplitSpec::Ratios { train: 0.7, valid: 0.2, test: 0.1, seed }).unwrap();
            let mut ids: Vec<String> = s.train.iter().chain(&s.valid).chain(&s.test).map(|d| d.id.clone()).collect();
            ids.sort();
            let mut expected: Vec<String> = (0..n).map(|i| i.to_string()).collect();
            expected.sort();
            prop_assert_eq!(ids, expected);
        }
    }
}
