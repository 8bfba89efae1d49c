//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use adcofe::checkpoint::Checkpoint;
use adcofe::classify::{predict, sop_pairs, sop_train, train, SopPair, TrainConfig};
use adcofe::corpus::{EmotionLabel, SpeakerId};
use adcofe::encoder::{
    self, embedding_block_params, untied_embedding_params, EncoderConfig, EncoderParams,
};
use adcofe::kgclient::{EnrichedSample, Fixture, KgClient, Provenance};
use adcofe::metrics::{confusion, per_class_metrics, MetricsReport};
use adcofe::sentlex::{normalize_compound, score_sentence, Lexicon};
use adcofe::synth::ordered_corpus;
use adcofe::textprep::{build_vocab, content_tokens, encode_sequence, Stoplist};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

/// Tolerances and budgets, fixed up front.
const METRIC_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const COMPOUND_TOL: f64 = 1e-4;
const SHARE_TOL: f64 = 1e-9;
const MIN_F1_GAIN: f64 = 0.03;
const LOSS_RATIO: f64 = 0.5;
const MEMORIZATION: f64 = 0.95;
const SIGMAS: f64 = 3.0;
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
/// Order prediction has no bag-of-words shortcut and needs a longer budget
/// than classification fine-tuning.
const SOP_EPOCHS: usize = 24;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = (&'static str, fn() -> Outcome);

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn within(start: Instant, budget: Duration) -> (bool, String) {
    let t = start.elapsed();
    (
        t <= budget,
        format!("{:.1}s of {}s", t.as_secs_f64(), budget.as_secs()),
    )
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let counts = common::random_counts(&mut rng);
        let pairs = common::expand_pairs(&counts);
        let l = |i| EmotionLabel::from_code(i).unwrap();
        let (g, p): (Vec<_>, Vec<_>) = pairs.iter().map(|&(g, p)| (l(g), l(p))).unzip();
        let r: MetricsReport<f64> = per_class_metrics(&confusion(&g, &p).unwrap());
        let o = common::oracle_scores(&pairs);
        for (c, m) in r.per_class.iter().enumerate() {
            worst = worst
                .max((m.accuracy - o.recall[c]).abs())
                .max((m.precision - o.precision[c]).abs())
                .max((m.f1 - o.f1[c]).abs());
            if m.support != o.support[c] {
                worst = f64::INFINITY;
            }
        }
        worst = worst
            .max((r.overall_accuracy - o.accuracy).abs())
            .max((r.weighted_f1 - o.weighted_f1).abs());
    }
    let (fast, time) = within(start, Duration::from_secs(10));
    outcome(
        worst <= METRIC_TOL && fast,
        format!("1000 matrices, max |diff| {worst:.2e}, {time}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let runs = [
        ("encoder L=1", common::check_encoder_gradients(1, 6)),
        ("encoder L=2", common::check_encoder_gradients(2, 7)),
        ("head", common::check_head_gradients(3)),
    ];
    let worst = runs
        .iter()
        .map(|(_, s)| s.worst_rel_err)
        .fold(0.0, f64::max);
    let checked: usize = runs.iter().map(|(_, s)| s.checked).sum();
    let tensors: usize = runs.iter().map(|(_, s)| s.tensors).sum();
    let (fast, time) = within(start, Duration::from_secs(60));
    outcome(
        worst < GRAD_TOL && fast,
        format!("{checked} coordinates over {tensors} tensors, worst relative error {worst:.2e}, {time}"),
    )
}

fn parameter_arithmetic() -> Outcome {
    let cfg = EncoderConfig::full_scale();
    let (factored, untied) = (embedding_block_params(&cfg), untied_embedding_params(&cfg));
    outcome(
        factored == 3_938_304 && untied == 23_040_000,
        format!("embedding block {factored}, untied {untied}"),
    )
}

fn cross_layer_sharing() -> Outcome {
    let at_depth = |layers| EncoderConfig {
        layers,
        seed: 5,
        ..EncoderConfig::default()
    };
    let (c4, c12) = (at_depth(4), at_depth(12));
    let p4: EncoderParams<f64> = encoder::init_params(&c4).unwrap();
    let p12: EncoderParams<f64> = encoder::init_params(&c12).unwrap();
    let size = |config: &EncoderConfig, encoder: &EncoderParams<f64>| {
        Checkpoint {
            config: config.clone(),
            encoder: encoder.clone(),
            head: None,
            metadata: serde_json::Value::Null,
        }
        .to_bytes()
        .len()
    };
    let (s4, s12) = (size(&c4, &p4), size(&c12, &p12));
    let vocab = build_vocab(&["the cat sat on the mat"], 64).unwrap();
    let seq = encode_sequence(&["the cat sat"], &vocab, 16).unwrap();
    let o4 = encoder::forward(&p4, &c4, &seq).unwrap().pooled;
    let o12 = encoder::forward(&p12, &c12, &seq).unwrap().pooled;
    let gap = (&o4 - &o12).iter().map(|x| x.abs()).fold(0.0, f64::max);
    outcome(
        s4 == s12 && gap > 1e-6,
        format!("checkpoint bytes L=4 {s4}, L=12 {s12}; max pooled difference {gap:.3e}"),
    )
}

fn golden_example() -> Outcome {
    let fixture = Fixture::parse(include_str!("../../core/data/kg_fixture_example.json")).unwrap();
    let client = KgClient::fixture(fixture);
    let original = "This weather is the best!";
    let tokens = content_tokens(original, &Stoplist::bundled());
    let variants = client.augment_sentence(original, &tokens, 3, 3).unwrap();
    let first = variants.first().cloned().unwrap_or_default();
    outcome(
        first == "This weathers is the bests!",
        format!("first variant {first:?}"),
    )
}

fn sentiment_formula() -> Outcome {
    let c = normalize_compound(2.4);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut sums: Vec<f64> = (0..1_000_000).map(|_| rng.gen_range(-60.0..60.0)).collect();
    sums.sort_by(f64::total_cmp);
    let compounds: Vec<f64> = sums.iter().map(|&s| normalize_compound(s)).collect();
    let bounded = compounds.iter().all(|&x| x > -1.0 && x < 1.0);
    let monotone = compounds.windows(2).all(|w| w[0] <= w[1]);

    let lex = Lexicon::bundled();
    let mut words: Vec<&str> = lex.words().map(|(w, _)| w).collect();
    words.extend(["table", "the", "very", "not", "and"]);
    let mut worst_share: f64 = 0.0;
    for _ in 0..2000 {
        let n = rng.gen_range(1..12);
        let text: Vec<&str> = (0..n).map(|_| *words.choose(&mut rng).unwrap()).collect();
        let s = score_sentence(&text.join(" "), &lex);
        worst_share = worst_share.max((s.neg + s.neu + s.pos - 1.0).abs());
    }
    outcome(
        (c - 0.5267).abs() <= COMPOUND_TOL && bounded && monotone && worst_share <= SHARE_TOL,
        format!(
            "compound(2.4) = {c:.6}; bounded {bounded}, monotone {monotone} over 1e6 sums; share sum error {worst_share:.1e}"
        ),
    )
}

fn cli(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_adcofe"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ADCOFE_CACHE_DIR")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "adcofe {args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// synth → enrich → train → eval in `dir/run`; returns the metrics file.
fn pipeline_run(dir: &Path, seed: u64, arm: &[&str]) -> Result<Vec<u8>, String> {
    let s = seed.to_string();
    cli(
        &["--seed", &s, "--out", "syn", "synth", "--per-class", "50"],
        dir,
    )?;
    let mut enrich = vec![
        "--seed",
        &s,
        "--out",
        "run",
        "enrich",
        "--corpus",
        "syn/corpus.csv",
        "--kg-fixture",
        "syn/kg_fixture.json",
        "--lexicon",
        "syn/lexicon.tsv",
    ];
    enrich.extend_from_slice(arm);
    cli(&enrich, dir)?;
    cli(&["--seed", &s, "--out", "run", "train"], dir)?;
    cli(&["--out", "run", "eval"], dir)?;
    fs::read(dir.join("run/metrics.json")).map_err(|e| e.to_string())
}

fn weighted_f1(metrics: &[u8]) -> f64 {
    let v: serde_json::Value = serde_json::from_slice(metrics).expect("metrics json");
    v["weighted_f1"].as_f64().expect("weighted_f1")
}

fn ablation() -> Outcome {
    let start = Instant::now();
    let arms: [(&str, &[&str]); 3] = [
        ("encoder-only", &["--variants", "0", "--no-sentiment"]),
        ("+KG", &["--no-sentiment"]),
        ("+KG+sentiment", &[]),
    ];
    let mut medians = Vec::new();
    for (_, flags) in arms {
        let mut scores = Vec::new();
        for seed in SEEDS {
            let dir = TempDir::new().unwrap();
            match pipeline_run(dir.path(), seed, flags) {
                Ok(m) => scores.push(weighted_f1(&m)),
                Err(e) => return outcome(false, e),
            }
        }
        medians.push(median(scores));
    }
    let ordered = medians[0] <= medians[1] && medians[1] <= medians[2];
    let gain = medians[2] - medians[0];
    let (fast, time) = within(start, Duration::from_secs(30 * 60));
    let shown: Vec<String> = arms
        .iter()
        .zip(&medians)
        .map(|((name, _), m)| format!("{name} {:.2}", 100.0 * m))
        .collect();
    outcome(
        ordered && gain >= MIN_F1_GAIN && fast,
        format!(
            "median weighted F1 {}; gain {:+.2} points; {time}",
            shown.join(", "),
            100.0 * gain
        ),
    )
}

fn separable_toy(seed: u64, n: usize) -> Vec<EnrichedSample> {
    let noise = [
        "table", "window", "paper", "street", "coffee", "river", "chair", "phone",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (label, keyword) = if i % 2 == 0 {
                (EmotionLabel::Happy, "joy")
            } else {
                (EmotionLabel::Sad, "gloom")
            };
            let mut words: Vec<&str> = noise.choose_multiple(&mut rng, 3).copied().collect();
            words.push(keyword);
            words.shuffle(&mut rng);
            EnrichedSample {
                conversation_id: format!("t{}", i / 10),
                turn_index: (i % 10) as u32,
                speaker: if i % 3 == 0 {
                    SpeakerId::P1
                } else {
                    SpeakerId::P2
                },
                text: words.join(" "),
                label: Some(label),
                provenance: Provenance::Original,
            }
        })
        .collect()
}

fn training_sanity() -> Outcome {
    let mut details = Vec::new();
    let mut pass = true;
    for seed in [0u64, 1, 2] {
        let samples = separable_toy(seed, 100);
        let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
        let vocab = build_vocab(&texts, 2000).unwrap();
        let enc = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        let tcfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let model = train::<f64>(&samples, &vocab, &enc, &tcfg, None).unwrap();
        let first = model.history[0].mean_loss;
        let last = model.history[model.history.len() - 1].mean_loss;
        let preds = predict(&samples, &vocab, &model.classifier).unwrap();
        let acc = preds
            .iter()
            .zip(&samples)
            .filter(|(p, s)| Some(p.label) == s.label)
            .count() as f64
            / samples.len() as f64;
        pass &= model.history.len() == 4 && last < LOSS_RATIO * first && acc >= MEMORIZATION;
        details.push(format!(
            "seed {seed}: loss {first:.3} -> {last:.3}, accuracy {acc:.3}"
        ));
    }
    outcome(pass, details.join("; "))
}

fn determinism() -> Outcome {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    match (
        pipeline_run(a.path(), 9, &[]),
        pipeline_run(b.path(), 9, &[]),
    ) {
        (Ok(x), Ok(y)) => outcome(
            x == y,
            format!("metrics.json {} bytes, identical: {}", x.len(), x == y),
        ),
        (Err(e), _) | (_, Err(e)) => outcome(false, e),
    }
}

fn sop_sanity() -> Outcome {
    let mut accs = Vec::new();
    let mut n_test = 0;
    for seed in SEEDS {
        let train_convs = ordered_corpus(20, 8, seed);
        let test_convs = ordered_corpus(20, 8, 1000 + seed);
        let train_pairs: Vec<SopPair> = train_convs.iter().flat_map(sop_pairs).collect();
        let test_pairs: Vec<SopPair> = test_convs.iter().flat_map(sop_pairs).collect();
        let texts: Vec<&str> = train_convs
            .iter()
            .flat_map(|c| c.utterances.iter().map(|u| u.text.as_str()))
            .collect();
        let vocab = build_vocab(&texts, 2000).unwrap();
        let enc = EncoderConfig {
            seed,
            ..EncoderConfig::default()
        };
        let tcfg = TrainConfig {
            seed,
            epochs: SOP_EPOCHS,
            ..TrainConfig::default()
        };
        let model = sop_train::<f64>(&train_pairs, &vocab, &enc, &tcfg).unwrap();
        accs.push(model.accuracy(&test_pairs, &vocab).unwrap());
        n_test = test_pairs.len();
    }
    let sigma = (0.25 / n_test as f64).sqrt();
    let m = median(accs.clone());
    let bar = 0.5 + SIGMAS * sigma;
    let shown: Vec<String> = accs.iter().map(|a| format!("{a:.3}")).collect();
    outcome(
        m > bar,
        format!(
            "held-out accuracy median {m:.3} (seeds {}) vs bar {bar:.3} on {n_test} pairs",
            shown.join(", ")
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("1 metric oracle equivalence", metric_oracle),
        ("2 gradient correctness", gradients),
        ("3 factorized embedding arithmetic", parameter_arithmetic),
        ("4 cross-layer sharing", cross_layer_sharing),
        ("5 enrichment golden example", golden_example),
        ("6 sentiment formula", sentiment_formula),
        ("7 ablation direction", ablation),
        ("8 training sanity", training_sanity),
        ("9 determinism", determinism),
        ("10 order-prediction sanity", sop_sanity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
