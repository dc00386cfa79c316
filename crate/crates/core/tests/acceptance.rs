//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line with the
//! measured value and its runtime; the binary exits non-zero if any failed.
//!
//! Runs with its own harness so the lines show up without `--nocapture`.

use emodial::add::{
    add_sentences, fused_distribution, steering_gradient_check, steering_step, SteeredState, SteeringConfig,
};
use emodial::corpus::{
    load_dailydialog_official, segment_dialogues, split_corpus, Dialogue, EmotionLabel, Polarity, PolarityGroups,
    SplitSpec, Utterance,
};
use emodial::detector::{
    edge_weights, response_polarity, train_detector, DetectorConfig, DetectorModel, DetectorTrainConfig, GraphWindow,
};
use emodial::eval::{bleu4, dist_n, PolarityJudge, BLEU_EPSILON};
use emodial::lm::LatentLanguageModel;
use emodial::pipeline::{Mode, RespondRequest};
use emodial::rewrite::{train_rewriter, ExtractorConfig, GeneratorConfig, RewriteTrainConfig};
use emodial::selector::gleu;
use emodial::synthetic::{marker_dialogues, polarity_sentences, polarity_words, template_split};
use emodial::text::{tokenize, Vocab};
use emodial::toy::{build_toy_stack, toy_dialogues, toy_vocab, train_toy_artifacts, ToyScale, ToyStack};
use emodial::train::{is_non_increasing, moving_average};
use emodial_nn::{softmax, Mat, ParamId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("metric oracles", secs(10), metric_oracles),
        ("empathy rule exhaustive", secs(1), empathy_rule_exhaustive),
        ("graph edge weights", secs(5), graph_edge_weights),
        ("gradient checks", secs(60), gradient_checks),
        ("detector learning", secs(120), detector_learning),
        ("rewrite transfer", secs(300), rewrite_transfer),
        ("add steering", secs(180), add_steering),
        ("end-to-end refinement", secs(300), end_to_end),
        ("determinism", secs(300), determinism),
        ("dailydialog segmentation (optional)", secs(600), dailydialog_segmentation),
    ];
    let mut failed = 0;
    for (name, limit, check) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = result.pass && in_time;
        let timing = if in_time {
            format!("{:.1}s", elapsed.as_secs_f64())
        } else {
            format!("{:.1}s, over the {}s limit", elapsed.as_secs_f64(), limit.as_secs())
        };
        if !pass {
            failed += 1;
        }
        let line = format!("{} {name}: {} ({timing})\n", if pass { "PASS" } else { "FAIL" }, result.detail);
        // Write straight to the stream so the line is never captured.
        let _ = std::io::stdout().write_all(line.as_bytes());
    }
    let _ = writeln!(std::io::stdout(), "acceptance: {} of {} criteria passed", 10 - failed, 10);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

/// The full toy stack, trained once. Its training time counts toward the
/// first criterion that asks for it.
fn stack() -> &'static ToyStack {
    static STACK: OnceLock<ToyStack> = OnceLock::new();
    STACK.get_or_init(|| build_toy_stack(ToyScale::Full).expect("toy stack trains"))
}

// Brute-force n-gram oracles: plain position loops, no hashing.

fn grams(s: &[String], n: usize) -> Vec<&[String]> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| &s[i..i + n]).collect()
}

fn occurrences(g: &[String], set: &[&[String]]) -> usize {
    set.iter().filter(|x| **x == g).count()
}

/// Clipped matches: for every distinct hypothesis n-gram, min of its two counts.
fn oracle_matches(h: &[String], r: &[String], n: usize) -> usize {
    let hg = grams(h, n);
    let rg = grams(r, n);
    let mut total = 0;
    for (i, g) in hg.iter().enumerate() {
        if hg[..i].contains(g) {
            continue;
        }
        total += occurrences(g, &hg).min(occurrences(g, &rg));
    }
    total
}

fn oracle_bleu(hyps: &[Vec<String>], refs: &[Vec<String>]) -> f64 {
    let mut log_p = 0.0;
    for n in 1..=4 {
        let matched: usize = hyps.iter().zip(refs).map(|(h, r)| oracle_matches(h, r, n)).sum();
        let total: usize = hyps.iter().map(|h| grams(h, n).len()).sum();
        let num = if matched == 0 { BLEU_EPSILON } else { matched as f64 };
        log_p += (num / total.max(1) as f64).ln();
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * (log_p / 4.0).exp()
}

fn oracle_dist(hyps: &[Vec<String>], n: usize) -> f64 {
    let all: Vec<&[String]> = hyps.iter().flat_map(|h| grams(h, n)).collect();
    if all.is_empty() {
        return 0.0;
    }
    let distinct = (0..all.len()).filter(|&i| !all[..i].contains(&all[i])).count();
    distinct as f64 / all.len() as f64
}

fn oracle_gleu(h: &[String], r: &[String]) -> f64 {
    let matched: usize = (1..=4).map(|n| oracle_matches(h, r, n)).sum();
    let hyp_total: usize = (1..=4).map(|n| grams(h, n).len()).sum();
    let ref_total: usize = (1..=4).map(|n| grams(r, n).len()).sum();
    (matched as f64 / hyp_total as f64).min(matched as f64 / ref_total as f64)
}

fn random_sentence(rng: &mut ChaCha8Rng, alphabet: usize, min_len: usize) -> Vec<String> {
    let len = rng.gen_range(min_len..=12);
    (0..len).map(|_| format!("w{}", rng.gen_range(0..alphabet))).collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let alphabet = rng.gen_range(1..=8);
        let size = rng.gen_range(1..=6);
        let hyps: Vec<Vec<String>> = (0..size).map(|_| random_sentence(&mut rng, alphabet, 0)).collect();
        let refs: Vec<Vec<String>> = (0..size).map(|_| random_sentence(&mut rng, alphabet, 0)).collect();
        worst = worst.max((bleu4(&hyps, &refs).unwrap() - oracle_bleu(&hyps, &refs)).abs());
        for n in 1..=4 {
            worst = worst.max((dist_n(&hyps, n).unwrap() - oracle_dist(&hyps, n)).abs());
        }
        let h = random_sentence(&mut rng, alphabet, 1);
        let r = random_sentence(&mut rng, alphabet, 1);
        worst = worst.max((gleu(&h, &r, 4).unwrap() - oracle_gleu(&h, &r)).abs());
    }
    outcome(worst <= 1e-9, format!("max deviation {worst:.1e} over 100 corpora (tolerance 1e-9)"))
}

fn empathy_rule_exhaustive() -> Outcome {
    let groups = PolarityGroups::daily_dialog();
    let label = |p: Polarity| EmotionLabel::new(if p == Polarity::Positive { "happiness" } else { "sadness" });
    let mut checked = 0;
    let mut wrong = 0;
    for len in 1..=4u32 {
        for bits in 0..(1u32 << len) {
            let seq: Vec<Polarity> =
                (0..len).map(|i| if bits >> i & 1 == 1 { Polarity::Positive } else { Polarity::Negative }).collect();
            let pos = seq.iter().filter(|&&p| p == Polarity::Positive).count();
            let expected = if pos > seq.len() - pos { Polarity::Positive } else { Polarity::Negative };
            let labels: Vec<EmotionLabel> = seq.iter().map(|&p| label(p)).collect();
            if response_polarity(&labels, &groups).unwrap() != expected {
                wrong += 1;
            }
            checked += 1;
        }
    }
    outcome(checked == 30 && wrong == 0, format!("{checked} sequences, {wrong} disagreements"))
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Sum-to-one and window support for one row of edge weights.
fn check_row(row: &[f64], i: usize, past: usize, future: usize) -> (f64, bool) {
    let inside = |j: usize| i.saturating_sub(past) <= j && j <= i + future;
    let sum_err = (row.iter().sum::<f64>() - 1.0).abs();
    let support_ok = row.iter().enumerate().all(|(j, &w)| if inside(j) { w > 0.0 } else { w == 0.0 });
    (sum_err, support_ok)
}

fn graph_edge_weights() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vocab = Vocab::build([tokenize("yay sigh grr hmm the cat sat").as_slice()], 1);
    let words = ["yay", "sigh", "grr", "hmm", "the", "cat", "sat"];
    let mut worst: f64 = 0.0;
    let mut support_ok = true;
    let mut rows = 0;
    for past in 0..=2 {
        for future in 0..=2 {
            let window = GraphWindow { past, future };
            let config = DetectorConfig {
                embed_dim: 6,
                filter_widths: vec![2, 3],
                filters: 4,
                gru_hidden: 3,
                graph_dim: 5,
                ffn_hidden: 6,
                window,
            };
            let model = DetectorModel::new(config, PolarityGroups::daily_dialog(), &vocab, past as u64 * 3 + future as u64)
                .unwrap();
            for trial in 0..20 {
                let n = rng.gen_range(1..=6);
                // The free function on random vectors and bilinear weights.
                let d = rng.gen_range(1..=5);
                let vectors = random_mat(&mut rng, n, d);
                let w_u = random_mat(&mut rng, d, d);
                for i in 0..n {
                    let (e, ok) = check_row(&edge_weights(i, &vectors, window, &w_u), i, past, future);
                    worst = worst.max(e);
                    support_ok &= ok;
                    rows += 1;
                }
                // The weights the model actually uses on a random dialogue.
                let utterances = (0..n)
                    .map(|k| {
                        let len = rng.gen_range(1..=4);
                        let text: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
                        Utterance::new((k % 2) as u8, text.join(" "), None).unwrap()
                    })
                    .collect();
                let dialogue = Dialogue { id: format!("g{trial}"), utterances, dialogue_emotion: None };
                let alpha = model.forward_trace(&dialogue).unwrap().alpha;
                for i in 0..n {
                    let (e, ok) = check_row(alpha.row(i), i, past, future);
                    worst = worst.max(e);
                    support_ok &= ok;
                    rows += 1;
                }
            }
        }
    }
    outcome(
        worst <= 1e-6 && support_ok,
        format!("{rows} rows, max |sum - 1| {worst:.1e}, support {}", if support_ok { "exact" } else { "violated" }),
    )
}

fn detector_gradient_error() -> f64 {
    let dialogues = marker_dialogues(3, 4, 21);
    let vocab = Vocab::build(dialogues.iter().flat_map(|d| d.utterances.iter().map(|u| u.tokens.as_slice())), 1);
    let config =
        DetectorConfig { embed_dim: 6, filter_widths: vec![2, 3], filters: 4, gru_hidden: 4, graph_dim: 5, ffn_hidden: 6, ..Default::default() };
    let mut model = DetectorModel::new(config, PolarityGroups::daily_dialog(), &vocab, 8).unwrap();
    let l2 = 1e-3;
    let (_, grads) = model.loss_and_gradient(&dialogues, l2).unwrap();
    let ids: Vec<ParamId> = model.store().ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..24 {
        let id = ids[rng.gen_range(0..ids.len())];
        let idx = rng.gen_range(0..model.store().get(id).len());
        let original = model.store().get(id).data()[idx];
        let mut at = |x: f64| {
            model.store_mut().get_mut(id).data_mut()[idx] = x;
            model.loss(&dialogues, l2).unwrap()
        };
        let numeric = (at(original + h) - at(original - h)) / (2.0 * h);
        at(original);
        let analytic = grads.get(id).data()[idx];
        worst = worst.max(relative_error(analytic, numeric));
    }
    worst
}

/// Below 1e-6 in magnitude both sides are treated as absolute errors.
fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn steering_gradient_error() -> f64 {
    let stack = stack();
    let parts = stack.agent.parts();
    let lm: &dyn LatentLanguageModel = parts.add_lm.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst: f64 = 0.0;
    for (k, text) in ["the food was awful . sorry", "my trip is lovely . glad to"].into_iter().enumerate() {
        let ids = lm.vocab().encode(&tokenize(text));
        let lat = lm.prefix_latents(&ids[..ids.len() - 1]).unwrap();
        let mut state = SteeredState::new(lm, lat.keys, lat.values, *ids.last().unwrap(), ids.len() - 1, Vec::new(), true, 10);
        let target = if k == 0 { Polarity::Positive } else { Polarity::Negative };
        // Check away from zero perturbation as well.
        let config = SteeringConfig { step_size: 0.05, ..Default::default() };
        steering_step(&mut state, lm, &parts.classifier, target, &config).unwrap();
        let coords: Vec<(usize, bool, usize)> = (0..12)
            .map(|_| {
                let layer = rng.gen_range(0..state.keys.len());
                (layer, rng.gen_bool(0.5), rng.gen_range(0..state.keys[layer].len()))
            })
            .collect();
        worst = worst.max(steering_gradient_check(&state, lm, &parts.classifier, target, 0.5, &coords, 1e-5));
    }
    worst
}

fn gradient_checks() -> Outcome {
    let detector = detector_gradient_error();
    let steering = steering_gradient_error();
    outcome(
        detector <= 1e-4 && steering <= 1e-4,
        format!("max relative error: detector {detector:.1e} (24 coords), steering {steering:.1e} (24 coords)"),
    )
}

fn detector_learning() -> Outcome {
    let splits = split_corpus(
        marker_dialogues(2000, 4, 11),
        &SplitSpec::Ratios { train: 0.8, valid: 0.1, test: 0.1, seed: 1 },
    )
    .unwrap();
    let vocab =
        Vocab::build(splits.train.iter().flat_map(|d| d.utterances.iter().map(|u| u.tokens.as_slice())), 1);
    let tc = DetectorTrainConfig { epochs: 20, target_accuracy: Some(0.95), ..Default::default() };
    let (_, log) =
        train_detector(&splits.train, &splits.valid, &vocab, PolarityGroups::daily_dialog(), DetectorConfig::default(), &tc)
            .unwrap();
    let best = log.iter().filter_map(|r| r.valid_accuracy).fold(0.0, f64::max);
    outcome(best >= 0.95, format!("validation accuracy {best:.3} after {} epochs (target 0.95 within 20)", log.len()))
}

fn rewrite_transfer() -> Outcome {
    let (train_t, test_t) = template_split(0);
    let train = polarity_sentences(&train_t);
    let test = polarity_sentences(&test_t);
    let tc = RewriteTrainConfig { extractor_epochs: 5, generator_epochs: 20, ..Default::default() };
    let (rewriter, log) =
        train_rewriter(&train, &test[..20], &toy_vocab(), ExtractorConfig::default(), GeneratorConfig::default(), &tc)
            .unwrap();
    let (mut flips, mut kept, mut content) = (0, 0, 0);
    for s in &test {
        let target = s.polarity.flip();
        let out = rewriter.rewrite(&s.tokens, target, tc.lambda).unwrap();
        let has = |p: Polarity| out.tokens.iter().any(|w| polarity_words(p).contains(&w.as_str()));
        if has(target) && !has(s.polarity) {
            flips += 1;
        }
        content += out.content.tokens.len();
        kept += out.content.tokens.iter().filter(|c| out.tokens.contains(c)).count();
    }
    let flip_rate = flips as f64 / test.len() as f64;
    let recall = kept as f64 / content.max(1) as f64;
    let losses: Vec<f64> = log.generator.iter().map(|r| r.train_loss).collect();
    let smooth = moving_average(&losses, 5);
    let monotone = !smooth.is_empty() && is_non_increasing(&smooth, 0.0);
    outcome(
        train_t.len() + test_t.len() >= 40 && flip_rate >= 0.8 && recall >= 0.9 && monotone,
        format!(
            "{} templates, {} held-out sentences: flip rate {flip_rate:.3} (>= 0.8), content recall {recall:.3} (>= 0.9), \
             loss moving average {}",
            train_t.len() + test_t.len(),
            test.len(),
            if monotone { "non-increasing" } else { "increases" }
        ),
    )
}

fn add_steering() -> Outcome {
    let stack = stack();
    let parts = stack.agent.parts();
    let lm: &dyn LatentLanguageModel = parts.add_lm.as_ref();

    // γ = 0 returns the base distribution whatever the steered one is.
    let mut fusion_err: f64 = 0.0;
    for text in ["the food was awful .", "my trip is lovely . glad", "the room"] {
        let ids = lm.vocab().encode(&tokenize(text));
        let lat = lm.prefix_latents(&ids[..ids.len() - 1]).unwrap();
        let mut state = SteeredState::new(lm, lat.keys, lat.values, *ids.last().unwrap(), ids.len() - 1, Vec::new(), true, 10);
        steering_step(&mut state, lm, &parts.classifier, Polarity::Positive, &stack.agent.config().add).unwrap();
        let steered = state.objective(lm, &parts.classifier, Polarity::Positive, 0.01).steered;
        let base = softmax(&lm.next_token_logits(&ids).unwrap());
        let fused = fused_distribution(&state.base, &steered, 0.0);
        fusion_err = fusion_err.max(base.iter().zip(&fused).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }

    let steered_config = stack.agent.config().add.clone();
    let plain_config = SteeringConfig { num_steps: 0, fusion_gamma: 0.0, ..steered_config.clone() };
    let rate = |config: &SteeringConfig| {
        let mut hits = 0;
        for run in 0..100u64 {
            let template = stack.test_templates[run as usize % stack.test_templates.len()];
            let polarity = if run % 2 == 0 { Polarity::Positive } else { Polarity::Negative };
            let prototype = template.sentence(polarity, run as usize).tokens;
            let config = SteeringConfig { seed: run, ..config.clone() };
            let out = add_sentences(lm, &parts.classifier, &[], &prototype, Polarity::Positive, &config).unwrap();
            if stack.judge.polarity(&out.added) == Polarity::Positive {
                hits += 1;
            }
        }
        hits
    };
    let steered = rate(&steered_config);
    let plain = rate(&plain_config);
    outcome(
        fusion_err <= 1e-12 && steered >= 80 && plain <= 30,
        format!("gamma=0 max deviation {fusion_err:.1e}; target reached steered {steered}/100 (>= 80), unsteered {plain}/100 (<= 30)"),
    )
}

fn gold_target(context: &Dialogue) -> Polarity {
    let labels: Vec<EmotionLabel> = context.utterances.iter().map(|u| u.emotion.clone().expect("toy labels")).collect();
    response_polarity(&labels, &PolarityGroups::daily_dialog()).unwrap()
}

fn end_to_end() -> Outcome {
    let stack = stack();
    let contexts = toy_dialogues(&stack.test_templates, 102, 99);
    let (mut prototype_ok, mut refined_ok, mut target_ok) = (0, 0, 0);
    for (i, dialogue) in contexts.iter().take(100).enumerate() {
        let mut context = dialogue.clone();
        context.utterances.pop();
        let gold = gold_target(&context);
        let trace = stack.agent.run(&context, i as u64, Mode::Full).unwrap();
        target_ok += usize::from(trace.target == gold);
        prototype_ok += usize::from(stack.judge.polarity(&trace.prototype) == gold);
        refined_ok += usize::from(stack.judge.polarity(&trace.response) == gold);
    }
    outcome(
        refined_ok > prototype_ok,
        format!("100 contexts: refined correct {refined_ok}, prototype correct {prototype_ok}, detected target matches rule on {target_ok}"),
    )
}

fn determinism() -> Outcome {
    let request = RespondRequest {
        seed: Some(17),
        ..RespondRequest::from_texts(&["the food was awful .", "what happened ?", "my room is lovely ."])
    };
    let full = &stack().agent;
    let a = serde_json::to_string(&full.respond(&request).unwrap()).unwrap();
    let b = serde_json::to_string(&full.respond(&request).unwrap()).unwrap();
    // Two independently trained quick stacks must agree byte for byte too.
    let quick = || {
        let agent = train_toy_artifacts(ToyScale::Quick).unwrap().into_stack().unwrap().agent;
        serde_json::to_string(&agent.respond(&request).unwrap()).unwrap()
    };
    let (c, d) = (quick(), quick());
    outcome(a == b && c == d, format!("repeat run identical: {}; retrained stack identical: {}", a == b, c == d))
}

fn dailydialog_segmentation() -> Outcome {
    let Some(root) = std::env::var_os("EMODIAL_DAILYDIALOG") else {
        return outcome(true, "skipped, set EMODIAL_DAILYDIALOG to the official release directory");
    };
    let dialogues = match load_dailydialog_official(&root) {
        Ok(d) => d,
        Err(e) => return outcome(true, format!("skipped, could not load {}: {e}", root.to_string_lossy())),
    };
    let total = segment_dialogues(&dialogues, 4).unwrap().dialogues.len();
    let off = (total as f64 - 64_190.0).abs() / 64_190.0;
    // Reported only: the source's filtering is not known exactly.
    outcome(true, format!("{total} sub-dialogues, {:.1}% from 64190 ({})", off * 100.0, if off <= 0.05 { "within 5%" } else { "outside 5%" }))
}
