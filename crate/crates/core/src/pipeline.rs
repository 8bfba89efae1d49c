//! File-backed pipeline stages: ingest, enrich, train, evaluate, report.
//!
//! Stages hand off through JSON-lines files so each can be rerun on its own.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::classify::{self, Classifier, ClassifyError, EpochStats, TrainConfig};
use crate::corpus::{
    load_corpus, split_corpus, Conversation, CorpusError, CorpusFormat, EmotionLabel, LoadedCorpus,
    Utterance,
};
use crate::encoder::{EncoderConfig, EncoderError};
use crate::kgclient::{enrich_corpus, EnrichedSample, KgClient, KgError, Provenance};
use crate::metrics::{
    confusion, per_class_metrics, render_comparison, render_comparison_json, ConfusionMatrix,
    MetricsError, MetricsReport,
};
use crate::sentlex::{add_sentiment_features, Lexicon, LexiconError};
use crate::textprep::{build_vocab, Stoplist, TextError, Vocab};

pub const TRAIN_FILE: &str = "train.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const ENRICH_META_FILE: &str = "enrich_meta.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_JSON_FILE: &str = "metrics.json";
pub const METRICS_TEXT_FILE: &str = "metrics.txt";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Classify(#[from] ClassifyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

/// Broad failure classes, used for process exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numeric,
}

impl PipelineError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            PipelineError::Classify(ClassifyError::NonFiniteLoss { .. }) => ErrorKind::Numeric,
            PipelineError::Classify(ClassifyError::InvalidConfig(_))
            | PipelineError::Encoder(EncoderError::InvalidConfig(_))
            | PipelineError::Invalid(_) => ErrorKind::Usage,
            _ => ErrorKind::Data,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_text(path: &Path, contents: &str) -> Result<(), PipelineError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).expect("rows serialize");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line).map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub path: String,
    pub conversations: usize,
    pub utterances: usize,
    pub dropped_count: usize,
    pub unlabeled: usize,
    pub label_counts: BTreeMap<String, usize>,
}

impl IngestSummary {
    pub fn render(&self) -> String {
        let mut s = format!(
            "{}: {} conversations, {} utterances, {} dropped (label outside set), {} unlabeled\n",
            self.path, self.conversations, self.utterances, self.dropped_count, self.unlabeled
        );
        for (label, n) in &self.label_counts {
            s.push_str(&format!("  {label:<12} {n}\n"));
        }
        s
    }
}

pub fn ingest(
    path: &Path,
    format: Option<CorpusFormat>,
) -> Result<(LoadedCorpus, IngestSummary), PipelineError> {
    let format = match format {
        Some(f) => f,
        None => CorpusFormat::from_path(path)?,
    };
    let corpus = load_corpus(path, format)?;
    let mut label_counts: BTreeMap<String, usize> = EmotionLabel::ALL
        .iter()
        .map(|l| (l.name().to_string(), 0))
        .collect();
    let mut unlabeled = 0;
    for u in corpus.conversations.iter().flat_map(|c| &c.utterances) {
        match u.label {
            Some(l) => *label_counts.entry(l.name().to_string()).or_default() += 1,
            None => unlabeled += 1,
        }
    }
    let summary = IngestSummary {
        path: path.display().to_string(),
        conversations: corpus.conversations.len(),
        utterances: corpus.utterance_count(),
        dropped_count: corpus.dropped_count,
        unlabeled,
        label_counts,
    };
    Ok((corpus, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichOptions {
    pub test_fraction: f64,
    pub seed: u64,
    /// Related terms requested per token.
    pub k: usize,
    /// Augmented variants per training utterance; 0 disables augmentation.
    pub variants: usize,
    pub threshold: f64,
    pub sentiment: bool,
}

impl Default for EnrichOptions {
    fn default() -> Self {
        EnrichOptions {
            test_fraction: 0.2,
            seed: 0,
            k: crate::kgclient::DEFAULT_K,
            variants: crate::kgclient::DEFAULT_VARIANTS,
            threshold: crate::sentlex::DEFAULT_THRESHOLD,
            sentiment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedSplits {
    pub train: Vec<EnrichedSample>,
    pub test: Vec<EnrichedSample>,
}

fn utterances(convs: &[Conversation]) -> Vec<Utterance> {
    convs
        .iter()
        .flat_map(|c| c.utterances.iter().cloned())
        .collect()
}

/// Splits by conversation, augments the training half through the knowledge
/// graph and appends sentiment feature tokens to both halves.
pub fn enrich(
    convs: &[Conversation],
    client: &KgClient,
    lexicon: &Lexicon,
    stoplist: &Stoplist,
    opts: &EnrichOptions,
) -> Result<EnrichedSplits, PipelineError> {
    let (train_convs, test_convs) = split_corpus(convs, opts.test_fraction, opts.seed)?;
    let mut train = enrich_corpus(
        &utterances(&train_convs),
        opts.k,
        opts.variants,
        client,
        stoplist,
    )?;
    let mut test: Vec<EnrichedSample> = utterances(&test_convs)
        .iter()
        .map(EnrichedSample::original)
        .collect();
    if opts.sentiment {
        train = add_sentiment_features(train, lexicon, opts.threshold);
        test = add_sentiment_features(test, lexicon, opts.threshold);
    }
    Ok(EnrichedSplits { train, test })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnrichMeta {
    pub options: EnrichOptions,
    pub kg_mode: String,
    pub train_samples: usize,
    pub augmented_samples: usize,
    pub test_samples: usize,
}

pub fn write_splits(
    dir: &Path,
    splits: &EnrichedSplits,
    meta: &EnrichMeta,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_jsonl(&dir.join(TRAIN_FILE), &splits.train)?;
    write_jsonl(&dir.join(TEST_FILE), &splits.test)?;
    let meta_json = serde_json::to_string_pretty(meta).expect("meta serializes");
    write_text(&dir.join(ENRICH_META_FILE), &(meta_json + "\n"))
}

pub fn enrich_meta(splits: &EnrichedSplits, options: &EnrichOptions, kg_mode: &str) -> EnrichMeta {
    EnrichMeta {
        options: options.clone(),
        kg_mode: kg_mode.to_string(),
        train_samples: splits.train.len(),
        augmented_samples: splits
            .train
            .iter()
            .filter(|s| s.provenance != Provenance::Original)
            .count(),
        test_samples: splits.test.len(),
    }
}

/// Rebuilds conversations from the original (non-augmented) samples, used
/// for order-prediction pretraining.
pub fn conversations_of(samples: &[EnrichedSample]) -> Vec<Conversation> {
    let mut by_id: BTreeMap<&str, Vec<Utterance>> = BTreeMap::new();
    for s in samples
        .iter()
        .filter(|s| s.provenance == Provenance::Original)
    {
        by_id
            .entry(&s.conversation_id)
            .or_default()
            .push(Utterance {
                conversation_id: s.conversation_id.clone(),
                turn_index: s.turn_index,
                speaker: s.speaker,
                text: s.text.clone(),
                label: s.label,
            });
    }
    by_id
        .into_iter()
        .map(|(id, mut utterances)| {
            utterances.sort_by_key(|u| u.turn_index);
            Conversation {
                id: id.to_string(),
                utterances,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    /// Epochs of order-prediction pretraining before fine-tuning; 0 skips it.
    pub sop_epochs: usize,
}

pub struct TrainOutcome {
    pub classifier: Classifier<f64>,
    pub vocab: Vocab,
    pub history: Vec<EpochStats>,
}

/// Builds the vocabulary from the training texts and fits encoder and head.
pub fn train(
    samples: &[EnrichedSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome, PipelineError> {
    opts.train.validate()?;
    opts.encoder.validate()?;
    if let Some(index) = samples.iter().position(|s| s.label.is_none()) {
        return Err(ClassifyError::Unlabeled { index }.into());
    }
    let texts: Vec<&str> = samples.iter().map(|s| s.text.as_str()).collect();
    let vocab = build_vocab(&texts, opts.encoder.vocab_size)?;
    let warm_start = if opts.sop_epochs > 0 {
        let sop_cfg = TrainConfig {
            epochs: opts.sop_epochs,
            ..opts.train.clone()
        };
        Some(classify::sop_pretrain(
            &conversations_of(samples),
            &vocab,
            &opts.encoder,
            &sop_cfg,
        )?)
    } else {
        None
    };
    let model = classify::train(samples, &vocab, &opts.encoder, &opts.train, warm_start)?;
    Ok(TrainOutcome {
        classifier: model.classifier,
        vocab,
        history: model.history,
    })
}

pub fn save_model(
    dir: &Path,
    outcome: &TrainOutcome,
    opts: &TrainOptions,
) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let ck = Checkpoint {
        config: outcome.classifier.config.clone(),
        encoder: outcome.classifier.encoder.clone(),
        head: Some(outcome.classifier.head.clone()),
        metadata: serde_json::json!({
            "train": opts.train,
            "sop_epochs": opts.sop_epochs,
        }),
    };
    ck.save(&dir.join(MODEL_FILE))?;
    outcome.vocab.save(&dir.join(VOCAB_FILE))?;
    write_jsonl(&dir.join(TRAIN_LOG_FILE), &outcome.history)
}

pub fn load_model(dir: &Path) -> Result<(Classifier<f64>, Vocab), PipelineError> {
    let ck = Checkpoint::<f64>::load(&dir.join(MODEL_FILE))?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() > ck.config.vocab_size {
        return Err(CheckpointError::Mismatch(format!(
            "vocabulary has {} pieces but the encoder holds {}",
            vocab.len(),
            ck.config.vocab_size
        ))
        .into());
    }
    let head = ck
        .head
        .ok_or_else(|| CheckpointError::Mismatch("checkpoint has no classification head".into()))?;
    let train: Option<TrainConfig> = serde_json::from_value(ck.metadata["train"].clone()).ok();
    let max_len = train.map_or(crate::textprep::DEFAULT_MAX_LEN, |t| t.max_len);
    Ok((
        Classifier {
            config: ck.config,
            encoder: ck.encoder,
            head,
            max_len,
        },
        vocab,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub conversation_id: String,
    pub turn_index: u32,
    pub gold: EmotionLabel,
    pub predicted: EmotionLabel,
    pub probs: Vec<f64>,
}

pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport<f64>,
    pub predictions: Vec<PredictionRow>,
}

pub fn evaluate(
    model: &Classifier<f64>,
    vocab: &Vocab,
    test: &[EnrichedSample],
) -> Result<Evaluation, PipelineError> {
    if test.is_empty() {
        return Err(MetricsError::Empty.into());
    }
    let golds: Vec<EmotionLabel> = test
        .iter()
        .enumerate()
        .map(|(index, s)| s.label.ok_or(ClassifyError::Unlabeled { index }))
        .collect::<Result<_, _>>()?;
    let preds = classify::predict(test, vocab, model)?;
    let labels: Vec<EmotionLabel> = preds.iter().map(|p| p.label).collect();
    let cm = confusion(&golds, &labels)?;
    let predictions = test
        .iter()
        .zip(&golds)
        .zip(&preds)
        .map(|((s, &gold), p)| PredictionRow {
            conversation_id: s.conversation_id.clone(),
            turn_index: s.turn_index,
            gold,
            predicted: p.label,
            probs: p.probs.to_vec(),
        })
        .collect();
    Ok(Evaluation {
        report: per_class_metrics(&cm),
        confusion: cm,
        predictions,
    })
}

/// Writes `metrics.json` (tagged with the run's seed), `metrics.txt` and
/// `predictions.jsonl` into `dir`.
pub fn write_evaluation(
    dir: &Path,
    eval: &Evaluation,
    include_paper_rows: bool,
    seed: u64,
) -> Result<Vec<PathBuf>, PipelineError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join(METRICS_JSON_FILE);
    let text = dir.join(METRICS_TEXT_FILE);
    let preds = dir.join(PREDICTIONS_FILE);
    let mut doc: serde_json::Value =
        serde_json::from_str(&render_comparison_json(&eval.report, false)).expect("metrics json");
    doc["seed"] = seed.into();
    write_text(
        &json,
        &(serde_json::to_string_pretty(&doc).expect("metrics json") + "\n"),
    )?;
    write_text(&text, &render_comparison(&eval.report, include_paper_rows))?;
    write_jsonl(&preds, &eval.predictions)?;
    Ok(vec![json, text, preds])
}

pub fn read_report(path: &Path) -> Result<MetricsReport<f64>, PipelineError> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&s).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    EncoderOnly,
    Kg,
    KgSentiment,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::EncoderOnly, Arm::Kg, Arm::KgSentiment];

    /// Enrichment options for this arm, derived from the full pipeline's.
    pub fn options(self, base: &EnrichOptions) -> EnrichOptions {
        EnrichOptions {
            variants: if self == Arm::EncoderOnly {
                0
            } else {
                base.variants
            },
            sentiment: self == Arm::KgSentiment,
            ..base.clone()
        }
    }
}

/// Runs enrich, train and evaluate in memory for one ablation arm.
pub fn run_arm(
    arm: Arm,
    convs: &[Conversation],
    client: &KgClient,
    lexicon: &Lexicon,
    stoplist: &Stoplist,
    enrich_opts: &EnrichOptions,
    train_opts: &TrainOptions,
) -> Result<Evaluation, PipelineError> {
    let splits = enrich(convs, client, lexicon, stoplist, &arm.options(enrich_opts))?;
    let outcome = train(&splits.train, train_opts)?;
    evaluate(&outcome.classifier, &outcome.vocab, &splits.test)
}
