//! Pipeline configuration: a TOML file with one `[section]` per component,
//! overridable through `EMODIAL_<SECTION>_<KEY>` environment variables.

use crate::add::{ClassifierTrainConfig, SteeringConfig};
use crate::detector::{DetectorConfig, DetectorTrainConfig};
use crate::generator::DecodeConfig;
use crate::lm::{LmConfig, LmTrainConfig};
use crate::pipeline::Mode;
use crate::rewrite::{ExtractorConfig, GeneratorConfig, RewriteTrainConfig};
use crate::selector::CandidateSource;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const ENV_PREFIX: &str = "EMODIAL_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment override {var}: {message}")]
    Env { var: String, message: String },
}

/// Where each artifact lives. Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactPaths {
    pub vocab: PathBuf,
    pub detector: PathBuf,
    pub lm: PathBuf,
    /// Separate language model for the add branch; the prototype model when unset.
    pub add_lm: Option<PathBuf>,
    /// Backward scorer for MMI reranking; plain sampling when unset.
    pub mmi: Option<PathBuf>,
    pub extractor: PathBuf,
    pub generator: PathBuf,
    pub classifier: PathBuf,
    /// Polarity judge used by `eval`.
    pub judge: Option<PathBuf>,
}

impl Default for ArtifactPaths {
    fn default() -> Self {
        let p = |name: &str| PathBuf::from("artifacts").join(name);
        Self {
            vocab: p("vocab.txt"),
            detector: p("detector.ckpt"),
            lm: p("lm.ckpt"),
            add_lm: None,
            mmi: None,
            extractor: p("extractor.ckpt"),
            generator: p("generator.ckpt"),
            classifier: p("classifier.ckpt"),
            judge: None,
        }
    }
}

impl ArtifactPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.vocab, &mut self.detector, &mut self.lm, &mut self.extractor, &mut self.generator, &mut self.classifier] {
            fix(p);
        }
        for p in [&mut self.add_lm, &mut self.mmi, &mut self.judge].into_iter().flatten() {
            fix(p);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Most context utterances a request may carry.
    pub max_turns: usize,
    /// Rerank sampled prototypes with the backward scorer when one is configured.
    pub use_mmi: bool,
    /// Whether the add branch reads the dialogue context before the prototype.
    pub add_reads_context: bool,
    pub mode: Mode,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { seed: 0, max_turns: 4, use_mmi: true, add_reads_context: true, mode: Mode::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewriteConfig {
    /// Deletion threshold multiplier.
    pub lambda: f64,
}

impl Default for RewriteConfig {
    fn default() -> Self {
        Self { lambda: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorConfig {
    pub tie: CandidateSource,
}

/// Taxonomy used when training the detector: `dailydialog` or `empathetic`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub taxonomy: String,
    /// Sub-dialogue length used by segmentation.
    pub rounds: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { taxonomy: "dailydialog".into(), rounds: 5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: ArtifactPaths,
    pub run: RunConfig,
    pub decode: DecodeConfig,
    pub rewrite: RewriteConfig,
    pub add: SteeringConfig,
    pub selector: SelectorConfig,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub lm: LmConfig,
    pub lm_train: LmTrainConfig,
    pub extractor: ExtractorConfig,
    pub generator: GeneratorConfig,
    pub rewriter_train: RewriteTrainConfig,
    pub classifier_train: ClassifierTrainConfig,
}

impl PipelineConfig {
    /// Parses `text`, applies overrides from `env`, and resolves relative paths against `base`.
    pub fn from_toml(
        text: &str,
        origin: &str,
        base: &Path,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: origin.to_string(), message };
        let mut table: toml::Table = toml::from_str(text).map_err(|e| parse_err(e.to_string()))?;
        apply_env_overrides(&mut table, env)?;
        let mut config: PipelineConfig = table.try_into().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        config.paths.resolve(base);
        Ok(config)
    }

    /// Reads a config file with overrides from the process environment.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, &path.display().to_string(), base, std::env::vars())
    }

    /// Defaults plus environment overrides, paths relative to the working directory.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_toml("", "<defaults>", Path::new("."), std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration always serializes")
    }
}

/// Section names known to the configuration, longest first so that
/// `detector_train` wins over `detector` when matching variable names.
fn sections() -> Vec<String> {
    let defaults = toml::Table::try_from(PipelineConfig::default()).expect("defaults serialize");
    let mut names: Vec<String> = defaults.keys().cloned().collect();
    names.sort_by_key(|n| std::cmp::Reverse(n.len()));
    names
}

/// `EMODIAL_DECODE_TOP_K=5` sets `[decode] top_k = 5`. Values parse as TOML
/// scalars or arrays when possible and as strings otherwise.
pub fn apply_env_overrides(table: &mut toml::Table, env: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
    let names = sections();
    let mut vars: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    vars.sort();
    for (var, raw) in vars {
        let rest = var[ENV_PREFIX.len()..].to_ascii_lowercase();
        let Some(section) = names.iter().find(|s| rest.starts_with(&format!("{s}_"))) else {
            continue;
        };
        let key = &rest[section.len() + 1..];
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let entry = table.entry(section.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        let Some(sec) = entry.as_table_mut() else {
            return Err(ConfigError::Env { var, message: format!("[{section}] is not a table") });
        };
        sec.insert(key.to_string(), value);
    }
    Ok(())
}
