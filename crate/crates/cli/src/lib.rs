//! The `emodial` command line: training, evaluation, one-shot responses, an
//! interactive chat loop and the HTTP service.

pub mod server;

use clap::{Parser, Subcommand, ValueEnum};
use emodial::add::{train_attribute_classifier, AttributeExample};
use emodial::config::PipelineConfig;
use emodial::corpus::{load_dailydialog, load_empathetic, read_dialogues, read_polarity_corpus, segment_dialogues, Dialogue, Polarity, PolarityGroups};
use emodial::detector::train_detector;
use emodial::eval::{compare_prototype_refined, evaluate, BowJudge, JudgeTrainConfig};
use emodial::generator::{dialogue_sequences, MmiScorer};
use emodial::lm::{train_lm, TransformerLm};
use emodial::pipeline::{summarize, Agent, Mode, PipelineError, RequestUtterance, RespondRequest, RespondResponse, WIRE_VERSION};
use emodial::rewrite::train_rewriter;
use emodial::selector::ResponseTrace;
use emodial::text::{tokenize, Vocab};
use emodial::toy::{train_toy_artifacts, write_toy_corpora, ToyScale};
use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, arguments or missing inputs: exit code 2.
    #[error("{0}")]
    Config(String),
    /// Failure while doing the work: exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(_) | PipelineError::Request { .. } => CliError::Config(e.to_string()),
            PipelineError::Stage { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "emodial", version, about = "Two-stage emotional dialogue agent")]
pub struct Cli {
    /// TOML configuration file; defaults plus EMODIAL_* overrides when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DialogueFormat {
    /// One JSON dialogue per line.
    Jsonl,
    /// DailyDialog text file; pair with --emotions.
    Dailydialog,
    /// EmpatheticDialogues CSV.
    Empathetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum LmFormat {
    /// Dialogues, spliced with separators.
    Jsonl,
    /// One sentence per line.
    Text,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the vocabulary from dialogues and text files.
    BuildVocab {
        /// JSONL dialogue files.
        #[arg(long)]
        dialogues: Vec<PathBuf>,
        /// Plain text or `text<TAB>label` files; every tab-separated field but the last is read.
        #[arg(long)]
        text: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the toy corpora, and with --train a full trained toy stack plus config.toml.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train: bool,
        /// Train for a few epochs only.
        #[arg(long)]
        quick: bool,
    },
    /// Train the emotion detector.
    TrainDetector {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = DialogueFormat::Jsonl)]
        format: DialogueFormat,
        /// DailyDialog emotion file.
        #[arg(long)]
        emotions: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        /// Cut dialogues into sub-dialogues of `data.rounds` utterances first.
        #[arg(long)]
        segment: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a language model for prototypes (dialogues) or additions (sentences).
    TrainLm {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = LmFormat::Jsonl)]
        format: LmFormat,
        /// Write to `paths.add_lm` instead of `paths.lm`.
        #[arg(long)]
        add: bool,
        /// Also fit the MMI backward scorer and write it to `paths.mmi`.
        #[arg(long)]
        mmi: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the saliency extractor and the style-conditioned generator.
    TrainRewriter {
        /// `text<TAB>polarity` lines.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
    },
    /// Train the attribute classifier on the add model's hidden states.
    TrainClassifier {
        /// `context<TAB>sentence<TAB>polarity` or `sentence<TAB>polarity` lines.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the bag-of-words polarity judge used by `eval`.
    TrainJudge {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score responses: BLEU-4, Dist-1/2 and emotion accuracy, or compare prototypes with refinements.
    Eval {
        /// One hypothesis per line.
        #[arg(long, required_unless_present = "traces")]
        hyp: Option<PathBuf>,
        /// One reference per line.
        #[arg(long, requires = "hyp")]
        r#ref: Option<PathBuf>,
        /// One target polarity per line.
        #[arg(long, requires = "hyp")]
        gold: Option<PathBuf>,
        /// JSONL of respond outputs or traces.
        #[arg(long, conflicts_with = "hyp")]
        traces: Option<PathBuf>,
        /// Judge file; `paths.judge` when omitted.
        #[arg(long)]
        judge: Option<PathBuf>,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Respond once to the given context utterances (alternating speakers).
    Respond {
        #[arg(required = true)]
        utterances: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_add: bool,
        #[arg(long, conflicts_with = "no_add")]
        no_rewrite: bool,
    },
    /// Chat on the terminal; each line is one user turn.
    Chat {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Serve POST /respond and GET /health.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
}

/// Parses `args`, runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    match execute(cli, &mut stdin.lock(), &mut stdout.lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    match path {
        Some(p) => PipelineConfig::load(p).map_err(config_err),
        None => PipelineConfig::from_env().map_err(config_err),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} not found: {}", path.display())))
    }
}

fn load_vocab(config: &PipelineConfig) -> Result<Vocab, CliError> {
    require_file(&config.paths.vocab, "vocabulary")?;
    Vocab::load(&config.paths.vocab).map_err(|e| CliError::Config(format!("{}: {e}", config.paths.vocab.display())))
}

fn write_json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> Result<(), CliError> {
    let line = serde_json::to_string(value).map_err(runtime)?;
    writeln!(out, "{line}").map_err(runtime)
}

fn read_lines(path: &Path, what: &str) -> Result<Vec<String>, CliError> {
    require_file(path, what)?;
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_attribute_examples(path: &Path) -> Result<Vec<AttributeExample>, CliError> {
    let mut out = Vec::new();
    for (i, line) in read_lines(path, "attribute corpus")?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |m: String| CliError::Config(format!("{}:{}: {m}", path.display(), i + 1));
        let (context, sentence, label) = match fields.as_slice() {
            [s, p] => ("", *s, *p),
            [c, s, p] => (*c, *s, *p),
            _ => return Err(bad("expected `[context<TAB>]sentence<TAB>polarity`".into())),
        };
        let polarity: Polarity = label.parse().map_err(bad)?;
        let sentence = tokenize(sentence);
        if sentence.is_empty() {
            return Err(bad("sentence has no tokens".into()));
        }
        out.push(AttributeExample { context: tokenize(context), sentence, polarity });
    }
    Ok(out)
}

fn load_dialogues(path: &Path, format: DialogueFormat, emotions: Option<&Path>) -> Result<Vec<Dialogue>, CliError> {
    require_file(path, "dialogue file")?;
    match format {
        DialogueFormat::Jsonl => read_dialogues(path).map_err(config_err),
        DialogueFormat::Dailydialog => {
            let emotions = emotions.ok_or_else(|| CliError::Config("--format dailydialog needs --emotions".into()))?;
            require_file(emotions, "emotion file")?;
            load_dailydialog(path, emotions).map_err(config_err)
        }
        DialogueFormat::Empathetic => load_empathetic(path).map_err(config_err),
    }
}

fn judge_path(explicit: Option<PathBuf>, config: &PipelineConfig) -> Result<PathBuf, CliError> {
    explicit
        .or_else(|| config.paths.judge.clone())
        .ok_or_else(|| CliError::Config("no judge: pass --judge or set paths.judge".into()))
}

fn mode_of(no_add: bool, no_rewrite: bool) -> Option<Mode> {
    match (no_add, no_rewrite) {
        (true, _) => Some(Mode::NoAdd),
        (_, true) => Some(Mode::NoRewrite),
        _ => None,
    }
}

/// Runs one parsed command with the given terminal streams.
pub fn execute(cli: Cli, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::BuildVocab { dialogues, text, min_count, out: dest } => {
            let mut sentences: Vec<Vec<String>> = Vec::new();
            for path in &dialogues {
                for d in load_dialogues(path, DialogueFormat::Jsonl, None)? {
                    sentences.extend(d.utterances.into_iter().map(|u| u.tokens));
                }
            }
            for path in &text {
                for line in read_lines(path, "text file")? {
                    let fields: Vec<&str> = line.split('\t').collect();
                    let keep = if fields.len() > 1 { &fields[..fields.len() - 1] } else { &fields[..] };
                    sentences.extend(keep.iter().map(|f| tokenize(f)));
                }
            }
            if sentences.is_empty() {
                return Err(CliError::Config("no input: pass --dialogues or --text".into()));
            }
            let vocab = Vocab::build(sentences.iter().map(|s| s.as_slice()), min_count);
            let dest = dest.unwrap_or(config.paths.vocab.clone());
            vocab.save(&dest).map_err(runtime)?;
            writeln!(out, "wrote {} tokens to {}", vocab.len(), dest.display()).map_err(runtime)
        }
        Command::Synth { out: dir, train, quick } => {
            let scale = if quick { ToyScale::Quick } else { ToyScale::Full };
            write_toy_corpora(&dir, scale).map_err(runtime)?;
            if train {
                let artifacts = train_toy_artifacts(scale).map_err(runtime)?;
                artifacts.save(&dir).map_err(runtime)?;
                writeln!(out, "wrote toy corpora, artifacts and {}", dir.join("config.toml").display()).map_err(runtime)
            } else {
                writeln!(out, "wrote toy corpora to {}", dir.display()).map_err(runtime)
            }
        }
        Command::TrainDetector { data, format, emotions, valid, segment, out: dest } => {
            let vocab = load_vocab(&config)?;
            let groups = PolarityGroups::by_name(&config.data.taxonomy)
                .ok_or_else(|| CliError::Config(format!("unknown taxonomy `{}`", config.data.taxonomy)))?;
            let mut train = load_dialogues(&data, format, emotions.as_deref())?;
            let mut valid = match &valid {
                Some(p) => load_dialogues(p, DialogueFormat::Jsonl, None)?,
                None => Vec::new(),
            };
            if segment {
                train = segment_dialogues(&train, config.data.rounds).map_err(config_err)?.dialogues;
                valid = segment_dialogues(&valid, config.data.rounds).map_err(config_err)?.dialogues;
            }
            let (model, log) = train_detector(&train, &valid, &vocab, groups, config.detector.clone(), &config.detector_train)
                .map_err(runtime)?;
            for r in &log {
                write_json_line(out, r)?;
            }
            let dest = dest.unwrap_or(config.paths.detector.clone());
            model.save(&dest).map_err(runtime)?;
            writeln!(out, "wrote {}", dest.display()).map_err(runtime)
        }
        Command::TrainLm { data, format, add, mmi, out: dest } => {
            let vocab = load_vocab(&config)?;
            let (sequences, dialogues) = match format {
                LmFormat::Jsonl => {
                    let d = load_dialogues(&data, DialogueFormat::Jsonl, None)?;
                    (dialogue_sequences(&d, &vocab), d)
                }
                LmFormat::Text => {
                    let lines = read_lines(&data, "text file")?;
                    let seqs = lines.iter().map(|l| vocab.encode(&tokenize(l))).filter(|s| s.len() > 1).collect();
                    (seqs, Vec::new())
                }
            };
            let (lm, log) = train_lm(&sequences, &vocab, config.lm.clone(), &config.lm_train).map_err(runtime)?;
            for r in &log {
                write_json_line(out, r)?;
            }
            let dest = match (dest, add) {
                (Some(d), _) => d,
                (None, true) => config.paths.add_lm.clone().ok_or_else(|| CliError::Config("--add needs paths.add_lm".into()))?,
                (None, false) => config.paths.lm.clone(),
            };
            lm.save(&dest).map_err(runtime)?;
            writeln!(out, "wrote {}", dest.display()).map_err(runtime)?;
            if mmi {
                if dialogues.is_empty() {
                    return Err(CliError::Config("--mmi needs dialogue input".into()));
                }
                let path = config.paths.mmi.clone().ok_or_else(|| CliError::Config("--mmi needs paths.mmi".into()))?;
                MmiScorer::from_dialogues(&dialogues, vocab.len()).save(&path).map_err(runtime)?;
                writeln!(out, "wrote {}", path.display()).map_err(runtime)?;
            }
            Ok(())
        }
        Command::TrainRewriter { data, valid } => {
            let vocab = load_vocab(&config)?;
            require_file(&data, "polarity corpus")?;
            let train = read_polarity_corpus(&data).map_err(config_err)?;
            let valid = match &valid {
                Some(p) => {
                    require_file(p, "validation corpus")?;
                    read_polarity_corpus(p).map_err(config_err)?
                }
                None => Vec::new(),
            };
            let (rewriter, log) = train_rewriter(
                &train,
                &valid,
                &vocab,
                config.extractor.clone(),
                config.generator.clone(),
                &config.rewriter_train,
            )
            .map_err(runtime)?;
            for r in log.extractor.iter().chain(&log.generator) {
                write_json_line(out, r)?;
            }
            rewriter.extractor.save(&config.paths.extractor).map_err(runtime)?;
            rewriter.generator.save(&config.paths.generator).map_err(runtime)?;
            writeln!(out, "wrote {} and {}", config.paths.extractor.display(), config.paths.generator.display()).map_err(runtime)
        }
        Command::TrainClassifier { data, valid, out: dest } => {
            let vocab = load_vocab(&config)?;
            let lm_path = config.paths.add_lm.clone().unwrap_or(config.paths.lm.clone());
            require_file(&lm_path, "add language model")?;
            let lm = TransformerLm::load(&lm_path, &vocab).map_err(config_err)?;
            let train = read_attribute_examples(&data)?;
            let valid = match &valid {
                Some(p) => read_attribute_examples(p)?,
                None => Vec::new(),
            };
            let (clf, report) = train_attribute_classifier(&train, &valid, &lm, &config.classifier_train).map_err(runtime)?;
            writeln!(out, "train accuracy {:.4} valid accuracy {:?}", report.train_accuracy, report.valid_accuracy).map_err(runtime)?;
            let dest = dest.unwrap_or(config.paths.classifier.clone());
            clf.save(&dest, &vocab.compat_hash()).map_err(runtime)?;
            writeln!(out, "wrote {}", dest.display()).map_err(runtime)
        }
        Command::TrainJudge { data, out: dest } => {
            require_file(&data, "polarity corpus")?;
            let corpus = read_polarity_corpus(&data).map_err(config_err)?;
            let judge = BowJudge::train("bow-judge", &corpus, &JudgeTrainConfig::default()).map_err(runtime)?;
            let dest = judge_path(dest, &config)?;
            judge.save(&dest).map_err(runtime)?;
            writeln!(out, "wrote {}", dest.display()).map_err(runtime)
        }
        Command::Eval { hyp, r#ref, gold, traces, judge, json } => {
            let path = judge_path(judge, &config)?;
            require_file(&path, "judge")?;
            let judge = BowJudge::load(&path).map_err(config_err)?;
            if let Some(traces) = traces {
                let mut parsed: Vec<ResponseTrace> = Vec::new();
                for (i, line) in read_lines(&traces, "trace file")?.iter().enumerate() {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let bad = |e: serde_json::Error| CliError::Config(format!("{}:{}: {e}", traces.display(), i + 1));
                    let value: serde_json::Value = serde_json::from_str(line).map_err(bad)?;
                    let trace = value.get("trace").cloned().unwrap_or(value);
                    parsed.push(serde_json::from_value(trace).map_err(bad)?);
                }
                let report = compare_prototype_refined(&parsed, &judge);
                return if json {
                    write_json_line(out, &report)
                } else {
                    writeln!(
                        out,
                        "samples {}\nprototype correct {}\nrefined correct {}\nprototype mean margin {:.4}\nrefined mean margin {:.4}",
                        report.samples.len(),
                        report.prototype_correct,
                        report.refined_correct,
                        report.prototype_mean_margin,
                        report.refined_mean_margin
                    )
                    .map_err(runtime)
                };
            }
            let hyp = hyp.expect("clap enforces --hyp without --traces");
            let r#ref = r#ref.ok_or_else(|| CliError::Config("--ref is required with --hyp".into()))?;
            let gold = gold.ok_or_else(|| CliError::Config("--gold is required with --hyp".into()))?;
            let tok = |lines: Vec<String>| lines.iter().map(|l| tokenize(l)).collect::<Vec<_>>();
            let hyps = tok(read_lines(&hyp, "hypothesis file")?);
            let refs = tok(read_lines(&r#ref, "reference file")?);
            let gold = read_lines(&gold, "gold file")?
                .iter()
                .enumerate()
                .map(|(i, l)| l.parse::<Polarity>().map_err(|e| CliError::Config(format!("gold line {}: {e}", i + 1))))
                .collect::<Result<Vec<_>, _>>()?;
            let report = evaluate(&hyps, &refs, &gold, &judge).map_err(config_err)?;
            if json {
                write_json_line(out, &report)
            } else {
                write!(out, "{}", report.summary()).map_err(runtime)
            }
        }
        Command::Respond { utterances, seed, no_add, no_rewrite } => {
            let agent = Agent::load(config)?;
            let mut request = RespondRequest::from_texts(&utterances);
            request.seed = seed;
            request.mode = mode_of(no_add, no_rewrite);
            let response = agent.respond(&request)?;
            write_json_line(out, &response)
        }
        Command::Chat { seed } => {
            let agent = Agent::load(config)?;
            chat(&agent, seed, input, out)
        }
        Command::Serve { bind } => {
            let agent = Arc::new(Agent::load(config)?);
            let rt = tokio::runtime::Runtime::new().map_err(runtime)?;
            rt.block_on(server::serve(agent, &bind)).map_err(runtime)
        }
    }
}

/// Terminal loop: reads user turns until EOF or `/quit`, keeping the most
/// recent turns that fit the agent's context window.
pub fn chat(agent: &Agent, seed: Option<u64>, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let max_turns = agent.config().run.max_turns.max(1);
    let mut history: Vec<RequestUtterance> = Vec::new();
    writeln!(out, "type a message, /quit to leave").map_err(runtime)?;
    let mut line = String::new();
    loop {
        write!(out, "you> ").map_err(runtime)?;
        out.flush().map_err(runtime)?;
        line.clear();
        if input.read_line(&mut line).map_err(runtime)? == 0 {
            break;
        }
        let text = line.trim();
        if text == "/quit" {
            break;
        }
        if text.is_empty() {
            continue;
        }
        let mut turns = history.clone();
        turns.push(RequestUtterance { speaker: "user".into(), text: text.to_string() });
        let start = turns.len().saturating_sub(max_turns);
        let request = RespondRequest { version: Some(WIRE_VERSION), utterances: turns.split_off(start), seed, mode: None };
        let response: RespondResponse = match agent.respond(&request) {
            Ok(r) => r,
            Err(e) => {
                writeln!(out, "error: {e}").map_err(runtime)?;
                continue;
            }
        };
        writeln!(out, "agent> {}", response.response).map_err(runtime)?;
        writeln!(out, "  trace: {}", summarize(&response.trace)).map_err(runtime)?;
        history.push(RequestUtterance { speaker: "user".into(), text: text.to_string() });
        history.push(RequestUtterance { speaker: "agent".into(), text: response.response });
    }
    Ok(())
}
