//! Seeded toy corpora with known structure, used by tests, the acceptance
//! suite and the `synth` CLI command.

use crate::add::AttributeExample;
use crate::corpus::{Dialogue, EmotionLabel, LabeledSentence, Polarity, Utterance};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Marker token and the DailyDialog emotion it signals.
pub const MARKERS: [(&str, &str); 7] = [
    ("hmm", "other"),
    ("grr", "anger"),
    ("eww", "disgust"),
    ("eek", "fear"),
    ("yay", "happiness"),
    ("sigh", "sadness"),
    ("wow", "surprise"),
];

pub const FILLER: [&str; 24] = [
    "i", "you", "we", "it", "that", "was", "is", "so", "just", "then", "there", "here", "today", "really", "went",
    "saw", "told", "about", "with", "my", "your", "and", "maybe", "well",
];

/// Dialogues of `utterances` turns; each utterance is filler plus exactly one
/// marker, and its label is the marker's emotion.
pub fn marker_dialogues(count: usize, utterances: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|d| {
            let utterances = (0..utterances)
                .map(|i| {
                    let (marker, emotion) = MARKERS[rng.gen_range(0..MARKERS.len())];
                    let len = rng.gen_range(2..=6);
                    let mut words: Vec<&str> = (0..len).map(|_| *FILLER.choose(&mut rng).unwrap()).collect();
                    words.insert(rng.gen_range(0..=len), marker);
                    Utterance::new((i % 2) as u8, words.join(" "), Some(EmotionLabel::new(emotion))).unwrap()
                })
                .collect();
            Dialogue { id: format!("marker-{d}"), utterances, dialogue_emotion: None }
        })
        .collect()
}

pub const NOUNS: [&str; 12] =
    ["food", "movie", "weather", "trip", "party", "game", "book", "music", "room", "service", "coffee", "show"];
pub const POSITIVE_WORDS: [&str; 5] = ["good", "great", "nice", "lovely", "wonderful"];
pub const NEGATIVE_WORDS: [&str; 5] = ["bad", "awful", "terrible", "poor", "horrible"];

/// Sentence frames; `{n}` is the noun slot and `{a}` the polarity slot.
pub const FRAMES: [&str; 10] = [
    "the {n} is {a} .",
    "i think the {n} is {a} .",
    "the {n} was {a} .",
    "this {n} is {a} .",
    "our {n} was {a} today .",
    "that {n} is so {a} .",
    "the {n} here is {a} .",
    "my {n} was really {a} .",
    "i found the {n} {a} .",
    "the {n} looks {a} .",
];

pub fn polarity_words(p: Polarity) -> &'static [&'static str] {
    match p {
        Polarity::Positive => &POSITIVE_WORDS,
        Polarity::Negative => &NEGATIVE_WORDS,
    }
}

/// One (frame, noun) combination of the templated polarity corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Template {
    pub frame: usize,
    pub noun: usize,
}

impl Template {
    pub fn fill(&self, adjective: &str) -> String {
        FRAMES[self.frame].replace("{n}", NOUNS[self.noun]).replace("{a}", adjective)
    }

    pub fn sentence(&self, polarity: Polarity, variant: usize) -> LabeledSentence {
        let words = polarity_words(polarity);
        LabeledSentence::new(&self.fill(words[variant % words.len()]), polarity)
    }
}

/// Every template split into seen and held-out sets; about a fifth of the
/// (frame, noun) combinations are held out.
pub fn template_split(seed: u64) -> (Vec<Template>, Vec<Template>) {
    let mut all: Vec<Template> =
        (0..FRAMES.len()).flat_map(|frame| (0..NOUNS.len()).map(move |noun| Template { frame, noun })).collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let held = all.len() / 5;
    let test = all.split_off(all.len() - held);
    (all, test)
}

/// Each template instantiated with every adjective of both polarities.
pub fn polarity_sentences(templates: &[Template]) -> Vec<LabeledSentence> {
    templates
        .iter()
        .flat_map(|t| {
            Polarity::ALL.into_iter().flat_map(move |p| (0..polarity_words(p).len()).map(move |k| t.sentence(p, k)))
        })
        .collect()
}

/// Addition sentences; each polarity continues differently after its first
/// word so the language model's states keep the polarity.
pub const POSITIVE_ADDITIONS: [&str; 4] =
    ["glad you liked it !", "happily it all worked out !", "what great news !", "lovely , enjoy it !"];
pub const NEGATIVE_ADDITIONS: [&str; 4] =
    ["sorry to hear that .", "sadly nothing went right .", "what bad luck .", "awful luck , take care ."];

pub fn additions(p: Polarity) -> &'static [&'static str] {
    match p {
        Polarity::Positive => &POSITIVE_ADDITIONS,
        Polarity::Negative => &NEGATIVE_ADDITIONS,
    }
}

/// Labelled addition sentences for the attribute classifier.
pub fn addition_sentences() -> Vec<LabeledSentence> {
    Polarity::ALL
        .into_iter()
        .flat_map(|p| additions(p).iter().map(move |s| LabeledSentence::new(s, p)))
        .collect()
}

/// Addition sentences read after a random template sentence, for training the
/// attribute classifier on the states it sees while steering.
pub fn addition_examples(templates: &[Template], count: usize, seed: u64) -> Vec<AttributeExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let t = templates[rng.gen_range(0..templates.len())];
            let context = t.sentence(Polarity::ALL[rng.gen_range(0..2)], rng.gen_range(0..5)).tokens;
            let polarity = Polarity::ALL[i % 2];
            let sentence = crate::text::tokenize(additions(polarity)[rng.gen_range(0..4)]);
            AttributeExample { context, sentence, polarity }
        })
        .collect()
}

/// Positive minus negative lexicon hits in `tokens`, counting template
/// adjectives and addition words.
pub fn lexicon_polarity(tokens: &[String]) -> Option<Polarity> {
    const POSITIVE_EXTRA: [&str; 2] = ["glad", "happily"];
    const NEGATIVE_EXTRA: [&str; 2] = ["sorry", "sadly"];
    let hits = |words: &[&str], extra: &[&str]| tokens.iter().filter(|t| words.contains(&t.as_str()) || extra.contains(&t.as_str())).count();
    let pos = hits(&POSITIVE_WORDS, &POSITIVE_EXTRA);
    let neg = hits(&NEGATIVE_WORDS, &NEGATIVE_EXTRA);
    match pos.cmp(&neg) {
        std::cmp::Ordering::Greater => Some(Polarity::Positive),
        std::cmp::Ordering::Less => Some(Polarity::Negative),
        std::cmp::Ordering::Equal => None,
    }
}

/// Training text for the language model: a template sentence followed by an
/// addition sentence whose polarity is positive with probability `positive_rate`.
pub fn lm_sentences(templates: &[Template], count: usize, positive_rate: f64, seed: u64) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = templates[rng.gen_range(0..templates.len())];
            let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
            let base = t.sentence(p, rng.gen_range(0..5));
            let ap = if rng.gen_bool(positive_rate) { Polarity::Positive } else { Polarity::Negative };
            let add = additions(ap)[rng.gen_range(0..4)];
            let mut tokens = base.tokens;
            tokens.extend(crate::text::tokenize(add));
            tokens
        })
        .collect()
}

/// Dialogues of template utterances labelled happiness or sadness by their
/// polarity; the final utterance (the response) talks about the same noun
/// with a random polarity.
pub fn template_dialogues(templates: &[Template], count: usize, context_len: usize, seed: u64) -> Vec<Dialogue> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emotion = |p: Polarity| EmotionLabel::new(if p == Polarity::Positive { "happiness" } else { "sadness" });
    (0..count)
        .map(|d| {
            let noun = rng.gen_range(0..NOUNS.len());
            let pick = |rng: &mut ChaCha8Rng| {
                let same: Vec<&Template> = templates.iter().filter(|t| t.noun == noun).collect();
                if same.is_empty() {
                    Template { frame: rng.gen_range(0..FRAMES.len()), noun }
                } else {
                    **same.choose(rng).unwrap()
                }
            };
            let utterances = (0..=context_len)
                .map(|i| {
                    let t = pick(&mut rng);
                    let p = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
                    let s = t.fill(polarity_words(p)[rng.gen_range(0..5)]);
                    Utterance::new((i % 2) as u8, s, Some(emotion(p))).unwrap()
                })
                .collect();
            Dialogue { id: format!("toy-{d}"), utterances, dialogue_emotion: None }
        })
        .collect()
}
