//! Emotion classification head, the training loop and sentence-order
//! prediction pretraining.

use std::collections::HashMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Conversation, EmotionLabel};
use crate::encoder::{self, EncoderConfig, EncoderError, EncoderParams};
use crate::kgclient::{EnrichedSample, Provenance};
use crate::optim::{clip_grad_norm, scale_grads, zero_grads, LrSchedule, Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::textprep::{encode_sequence, EncodedSequence, TextError, Vocab, DEFAULT_MAX_LEN};

pub const HIDDEN_WIDTH: usize = 100;
pub const NUM_CLASSES: usize = EmotionLabel::COUNT;
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ClassifyError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("sample {index} has no label")]
    Unlabeled { index: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error("expected input of width {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no labeled samples to train on")]
    NoSamples,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T> {
    /// `in × out`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

const RELU_GAIN: f64 = 6.0;
const LINEAR_GAIN: f64 = 1.0;

impl<T: Scalar> Dense<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform weights in `±sqrt(gain / input)`, zero bias. Gain 6 suits
    /// ReLU layers, gain 1 the linear output layers.
    fn random<R: Rng>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / input as f64).sqrt();
        let mut d = Self::zeros(input, output);
        d.weight
            .iter_mut()
            .for_each(|w| *w = T::lit(rng.gen_range(-bound..=bound)));
        d
    }

    fn apply(&self, x: ArrayView1<T>) -> Array1<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: ArrayView1<T>, dy: &Array1<T>, grads: &mut Dense<T>) -> Array1<T> {
        for (mut row, &xi) in grads.weight.rows_mut().into_iter().zip(x) {
            row.scaled_add(xi, dy);
        }
        grads.bias += dy;
        self.weight.dot(dy)
    }
}

/// Three ReLU layers of width 100 followed by a 6-way softmax.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T> {
    pub dense1: Dense<T>,
    pub dense2: Dense<T>,
    pub dense3: Dense<T>,
    pub out: Dense<T>,
}

impl<T: Scalar> HeadParams<T> {
    pub fn zeros(input_dim: usize) -> Self {
        HeadParams {
            dense1: Dense::zeros(input_dim, HIDDEN_WIDTH),
            dense2: Dense::zeros(HIDDEN_WIDTH, HIDDEN_WIDTH),
            dense3: Dense::zeros(HIDDEN_WIDTH, HIDDEN_WIDTH),
            out: Dense::zeros(HIDDEN_WIDTH, NUM_CLASSES),
        }
    }

    pub fn init(input_dim: usize, rng: &mut impl Rng) -> Self {
        HeadParams {
            dense1: Dense::random(input_dim, HIDDEN_WIDTH, RELU_GAIN, rng),
            dense2: Dense::random(HIDDEN_WIDTH, HIDDEN_WIDTH, RELU_GAIN, rng),
            dense3: Dense::random(HIDDEN_WIDTH, HIDDEN_WIDTH, RELU_GAIN, rng),
            out: Dense::random(HIDDEN_WIDTH, NUM_CLASSES, LINEAR_GAIN, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dense1.weight.nrows()
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        vec![
            ("head.dense1.weight", self.dense1.weight.view().into_dyn()),
            ("head.dense1.bias", self.dense1.bias.view().into_dyn()),
            ("head.dense2.weight", self.dense2.weight.view().into_dyn()),
            ("head.dense2.bias", self.dense2.bias.view().into_dyn()),
            ("head.dense3.weight", self.dense3.weight.view().into_dyn()),
            ("head.dense3.bias", self.dense3.bias.view().into_dyn()),
            ("head.out.weight", self.out.weight.view().into_dyn()),
            ("head.out.bias", self.out.bias.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        vec![
            (
                "head.dense1.weight",
                self.dense1.weight.view_mut().into_dyn(),
            ),
            ("head.dense1.bias", self.dense1.bias.view_mut().into_dyn()),
            (
                "head.dense2.weight",
                self.dense2.weight.view_mut().into_dyn(),
            ),
            ("head.dense2.bias", self.dense2.bias.view_mut().into_dyn()),
            (
                "head.dense3.weight",
                self.dense3.weight.view_mut().into_dyn(),
            ),
            ("head.dense3.bias", self.dense3.bias.view_mut().into_dyn()),
            ("head.out.weight", self.out.weight.view_mut().into_dyn()),
            ("head.out.bias", self.out.bias.view_mut().into_dyn()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T> {
    pub probs: Array1<T>,
    pub label: EmotionLabel,
}

pub struct HeadTape<T> {
    input: Array1<T>,
    hidden: [Array1<T>; 3],
    probs: Array1<T>,
}

/// Max-subtracted softmax.
pub fn softmax<T: Scalar>(logits: ArrayView1<T>) -> Array1<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exp = logits.mapv(|l| (l - max).exp());
    let sum = exp.sum();
    exp / sum
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Scalar>(values: ArrayView1<T>) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn relu<T: Scalar>(x: Array1<T>) -> Array1<T> {
    x.mapv(|v| v.max(T::zero()))
}

pub fn head_logits<T: Scalar>(
    head: &HeadParams<T>,
    pooled: ArrayView1<T>,
) -> Result<(Array1<T>, [Array1<T>; 3]), ClassifyError> {
    if pooled.len() != head.input_dim() {
        return Err(ClassifyError::DimensionMismatch {
            expected: head.input_dim(),
            got: pooled.len(),
        });
    }
    let h1 = relu(head.dense1.apply(pooled));
    let h2 = relu(head.dense2.apply(h1.view()));
    let h3 = relu(head.dense3.apply(h2.view()));
    let logits = head.out.apply(h3.view());
    Ok((logits, [h1, h2, h3]))
}

pub fn head_forward<T: Scalar>(
    head: &HeadParams<T>,
    pooled: ArrayView1<T>,
) -> Result<(Prediction<T>, HeadTape<T>), ClassifyError> {
    let (logits, hidden) = head_logits(head, pooled)?;
    let probs = softmax(logits.view());
    let label = EmotionLabel::from_code(argmax(probs.view())).expect("six classes");
    let tape = HeadTape {
        input: pooled.to_owned(),
        hidden,
        probs: probs.clone(),
    };
    Ok((Prediction { probs, label }, tape))
}

/// Backpropagates `dlogits` through the head, returning the gradient with
/// respect to the pooled input.
pub fn head_backward_into<T: Scalar>(
    head: &HeadParams<T>,
    tape: &HeadTape<T>,
    dlogits: &Array1<T>,
    grads: &mut HeadParams<T>,
) -> Array1<T> {
    let relu_mask = |d: Array1<T>, h: &Array1<T>| {
        let mut d = d;
        d.zip_mut_with(h, |g, &a| {
            if a <= T::zero() {
                *g = T::zero()
            }
        });
        d
    };
    let [h1, h2, h3] = &tape.hidden;
    let d3 = relu_mask(head.out.backward(h3.view(), dlogits, &mut grads.out), h3);
    let d2 = relu_mask(head.dense3.backward(h2.view(), &d3, &mut grads.dense3), h2);
    let d1 = relu_mask(head.dense2.backward(h1.view(), &d2, &mut grads.dense2), h1);
    head.dense1
        .backward(tape.input.view(), &d1, &mut grads.dense1)
}

/// Gradient of the cross-entropy loss with respect to the logits.
pub fn xent_logit_grad<T: Scalar>(probs: &Array1<T>, gold: usize) -> Array1<T> {
    let mut d = probs.clone();
    d[gold] -= T::one();
    d
}

pub fn loss_xent<T: Scalar>(pred: &Prediction<T>, gold: EmotionLabel) -> T {
    -pred.probs[gold.code()].max(T::lit(PROB_FLOOR)).ln()
}

pub fn head_loss_and_grads<T: Scalar>(
    head: &HeadParams<T>,
    pooled: ArrayView1<T>,
    gold: EmotionLabel,
    grads: &mut HeadParams<T>,
) -> Result<(T, Array1<T>), ClassifyError> {
    let (pred, tape) = head_forward(head, pooled)?;
    let loss = loss_xent(&pred, gold);
    let dlogits = xent_logit_grad(&tape.probs, gold.code());
    let dpooled = head_backward_into(head, &tape, &dlogits, grads);
    Ok((loss, dpooled))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleUnit {
    /// Whole same-speaker runs move together, keeping their internal order.
    #[default]
    SpeakerBatch,
    Utterance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub max_len: usize,
    pub shuffle: ShuffleUnit,
    /// Global gradient-norm ceiling applied before each step.
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 1,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            max_len: DEFAULT_MAX_LEN,
            shuffle: ShuffleUnit::SpeakerBatch,
            clip_norm: Some(1.0),
            schedule: LrSchedule::Constant,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.epochs == 0 {
            return Err(ClassifyError::InvalidConfig("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(ClassifyError::InvalidConfig(
                "batch_size must be at least 1",
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ClassifyError::InvalidConfig(
                "learning_rate must be positive",
            ));
        }
        if self.clip_norm.is_some_and(|c| !(c.is_finite() && c > 0.0)) {
            return Err(ClassifyError::InvalidConfig("clip_norm must be positive"));
        }
        if !self.schedule.is_valid() {
            return Err(ClassifyError::InvalidConfig(
                "warmup fraction must lie in [0, 1)",
            ));
        }
        if self.max_len < 3 {
            return Err(ClassifyError::InvalidConfig("max_len must be at least 3"));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

const HEAD_INIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_ms: u64,
}

/// Encoder plus classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T> {
    pub config: EncoderConfig,
    pub encoder: EncoderParams<T>,
    pub head: HeadParams<T>,
    pub max_len: usize,
}

impl<T: Scalar> Classifier<T> {
    pub fn predict_encoded(&self, seq: &EncodedSequence) -> Result<Prediction<T>, ClassifyError> {
        let out = encoder::forward(&self.encoder, &self.config, &seq.trimmed())?;
        Ok(head_forward(&self.head, out.pooled.view())?.0)
    }

    pub fn predict_text(&self, text: &str, vocab: &Vocab) -> Result<Prediction<T>, ClassifyError> {
        let seq = encode_sequence(&[text], vocab, self.max_len)?;
        self.predict_encoded(&seq)
    }
}

pub struct TrainedModel<T> {
    pub classifier: Classifier<T>,
    pub history: Vec<EpochStats>,
}

/// Splits samples into speaker batches. Each augmentation variant is treated
/// as its own copy of the conversation, so a batch is a maximal same-speaker
/// run within one copy and an utterance's variants land in different batches.
fn speaker_runs(samples: &[EnrichedSample]) -> Vec<Vec<usize>> {
    let mut runs: Vec<Vec<usize>> = Vec::new();
    let mut open: HashMap<(&str, u32), usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let copy = match s.provenance {
            Provenance::Original => 0,
            Provenance::KgAugmented(k) => k,
        };
        let key = (s.conversation_id.as_str(), copy);
        match open.get(&key) {
            Some(&r) if samples[runs[r][0]].speaker == s.speaker => runs[r].push(i),
            _ => {
                open.insert(key, runs.len());
                runs.push(vec![i]);
            }
        }
    }
    runs
}

fn epoch_order(samples: &[EnrichedSample], unit: ShuffleUnit, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match unit {
        ShuffleUnit::SpeakerBatch => {
            let mut runs = speaker_runs(samples);
            runs.shuffle(rng);
            runs.into_iter().flatten().collect()
        }
        ShuffleUnit::Utterance => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            idx.shuffle(rng);
            idx
        }
    }
}

/// Fine-tunes encoder and head with cross-entropy. The encoder starts from
/// `warm_start` when given, otherwise from `init_params(enc_cfg)`.
pub fn train<T: Scalar>(
    samples: &[EnrichedSample],
    vocab: &Vocab,
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
    warm_start: Option<EncoderParams<T>>,
) -> Result<TrainedModel<T>, ClassifyError> {
    tcfg.validate()?;
    enc_cfg.validate()?;
    if samples.is_empty() {
        return Err(ClassifyError::NoSamples);
    }
    let golds: Vec<EmotionLabel> = samples
        .iter()
        .enumerate()
        .map(|(index, s)| s.label.ok_or(ClassifyError::Unlabeled { index }))
        .collect::<Result<_, _>>()?;
    let encoded: Vec<EncodedSequence> = samples
        .iter()
        .map(|s| encode_sequence(&[s.text.as_str()], vocab, tcfg.max_len).map(|e| e.trimmed()))
        .collect::<Result<_, _>>()?;

    let mut enc = match warm_start {
        Some(p) => p,
        None => encoder::init_params(enc_cfg)?,
    };
    let mut head = HeadParams::init(enc_cfg.hidden_dim, &mut tcfg.rng(HEAD_INIT_STREAM));
    let mut enc_grads = EncoderParams::zeros(enc_cfg);
    let mut head_grads = HeadParams::zeros(enc_cfg.hidden_dim);
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.learning_rate);
    let mut shuffle_rng = tcfg.rng(SHUFFLE_STREAM);
    let total_updates = tcfg.epochs * samples.len().div_ceil(tcfg.batch_size);
    let mut updates = 0;

    let mut history = Vec::with_capacity(tcfg.epochs);
    for epoch in 1..=tcfg.epochs {
        let start = Instant::now();
        let order = epoch_order(samples, tcfg.shuffle, &mut shuffle_rng);
        let mut total = 0.0;
        let mut pending = 0usize;
        for (step, &i) in order.iter().enumerate() {
            let out = encoder::forward(&enc, enc_cfg, &encoded[i])?;
            let (loss, dpooled) =
                head_loss_and_grads(&head, out.pooled.view(), golds[i], &mut head_grads)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(ClassifyError::NonFiniteLoss { epoch, step });
            }
            total += loss;
            encoder::backward_into(&enc, enc_cfg, &out.tape, dpooled.view(), &mut enc_grads)?;
            pending += 1;
            if pending == tcfg.batch_size || step + 1 == order.len() {
                if pending > 1 {
                    let f = T::lit(1.0 / pending as f64);
                    scale_grads(&mut enc_grads, f);
                    scale_grads(&mut head_grads, f);
                }
                if let Some(c) = tcfg.clip_norm {
                    clip_grad_norm(&mut [&mut enc_grads, &mut head_grads], c);
                }
                updates += 1;
                opt.set_learning_rate(
                    tcfg.learning_rate * tcfg.schedule.factor(updates, total_updates),
                );
                opt.step(&mut [&mut enc, &mut head], &[&enc_grads, &head_grads]);
                zero_grads(&mut enc_grads);
                zero_grads(&mut head_grads);
                pending = 0;
            }
        }
        let mean_loss = total / order.len() as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.4}");
        history.push(EpochStats {
            epoch,
            mean_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(TrainedModel {
        classifier: Classifier {
            config: enc_cfg.clone(),
            encoder: enc,
            head,
            max_len: tcfg.max_len,
        },
        history,
    })
}

/// One prediction per sample, computed in parallel; parameters are only read.
pub fn predict<T: Scalar>(
    samples: &[EnrichedSample],
    vocab: &Vocab,
    model: &Classifier<T>,
) -> Result<Vec<Prediction<T>>, ClassifyError> {
    samples
        .par_iter()
        .map(|s| model.predict_text(&s.text, vocab))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SopLabel {
    Swapped = 0,
    InOrder = 1,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SopPair {
    pub first: String,
    pub second: String,
    pub label: SopLabel,
}

/// For each consecutive utterance pair, the in-order pair followed by the
/// swapped one.
pub fn sop_pairs(conv: &Conversation) -> Vec<SopPair> {
    conv.utterances
        .windows(2)
        .flat_map(|w| {
            let (a, b) = (&w[0].text, &w[1].text);
            [
                SopPair {
                    first: a.clone(),
                    second: b.clone(),
                    label: SopLabel::InOrder,
                },
                SopPair {
                    first: b.clone(),
                    second: a.clone(),
                    label: SopLabel::Swapped,
                },
            ]
        })
        .collect()
}

/// Linear two-way head used only during order-prediction pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct SopHead<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> SopHead<T> {
    pub fn zeros(input_dim: usize) -> Self {
        SopHead {
            weight: Array2::zeros((input_dim, 2)),
            bias: Array1::zeros(2),
        }
    }

    pub fn init(input_dim: usize, rng: &mut impl Rng) -> Self {
        let d = Dense::random(input_dim, 2, LINEAR_GAIN, rng);
        SopHead {
            weight: d.weight,
            bias: d.bias,
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        vec![
            ("sop.weight", self.weight.view().into_dyn()),
            ("sop.bias", self.bias.view().into_dyn()),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        vec![
            ("sop.weight", self.weight.view_mut().into_dyn()),
            ("sop.bias", self.bias.view_mut().into_dyn()),
        ]
    }

    pub fn probs(&self, pooled: ArrayView1<T>) -> Array1<T> {
        softmax((pooled.dot(&self.weight) + &self.bias).view())
    }
}

pub struct SopModel<T> {
    pub config: EncoderConfig,
    pub encoder: EncoderParams<T>,
    pub head: SopHead<T>,
    pub max_len: usize,
    pub history: Vec<EpochStats>,
}

fn encode_pair(
    pair: &SopPair,
    vocab: &Vocab,
    max_len: usize,
) -> Result<EncodedSequence, TextError> {
    encode_sequence(&[pair.first.as_str(), pair.second.as_str()], vocab, max_len)
        .map(|e| e.trimmed())
}

impl<T: Scalar> SopModel<T> {
    pub fn predict(&self, pair: &SopPair, vocab: &Vocab) -> Result<SopLabel, ClassifyError> {
        let seq = encode_pair(pair, vocab, self.max_len)?;
        let out = encoder::forward(&self.encoder, &self.config, &seq)?;
        let p = self.head.probs(out.pooled.view());
        Ok(if argmax(p.view()) == 1 {
            SopLabel::InOrder
        } else {
            SopLabel::Swapped
        })
    }

    /// Fraction of pairs whose order is predicted correctly.
    pub fn accuracy(&self, pairs: &[SopPair], vocab: &Vocab) -> Result<f64, ClassifyError> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let correct = pairs
            .par_iter()
            .map(|p| self.predict(p, vocab).map(|l| usize::from(l == p.label)))
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .sum::<usize>();
        Ok(correct as f64 / pairs.len() as f64)
    }
}

/// Trains the encoder and a temporary linear head to tell in-order pairs
/// from swapped ones.
pub fn sop_train<T: Scalar>(
    pairs: &[SopPair],
    vocab: &Vocab,
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
) -> Result<SopModel<T>, ClassifyError> {
    tcfg.validate()?;
    let mut enc: EncoderParams<T> = encoder::init_params(enc_cfg)?;
    let mut head = SopHead::init(enc_cfg.hidden_dim, &mut tcfg.rng(HEAD_INIT_STREAM));
    let encoded: Vec<EncodedSequence> = pairs
        .iter()
        .map(|p| encode_pair(p, vocab, tcfg.max_len))
        .collect::<Result<_, _>>()?;
    let mut enc_grads = EncoderParams::zeros(enc_cfg);
    let mut head_grads = SopHead::zeros(enc_cfg.hidden_dim);
    let mut opt = Optimizer::new(tcfg.optimizer, tcfg.learning_rate);
    let mut rng = tcfg.rng(SHUFFLE_STREAM);
    let total_updates = tcfg.epochs * pairs.len().div_ceil(tcfg.batch_size);
    let mut updates = 0;
    let mut history = Vec::new();
    for epoch in 1..=if pairs.is_empty() { 0 } else { tcfg.epochs } {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut pending = 0usize;
        for (step, &i) in order.iter().enumerate() {
            let out = encoder::forward(&enc, enc_cfg, &encoded[i])?;
            let probs = head.probs(out.pooled.view());
            let gold = pairs[i].label as usize;
            let loss = -probs[gold].max(T::lit(PROB_FLOOR)).ln().as_f64();
            if !loss.is_finite() {
                return Err(ClassifyError::NonFiniteLoss { epoch, step });
            }
            total += loss;
            let dlogits = xent_logit_grad(&probs, gold);
            for (mut row, &x) in head_grads.weight.rows_mut().into_iter().zip(&out.pooled) {
                row.scaled_add(x, &dlogits);
            }
            head_grads.bias += &dlogits;
            let dpooled = head.weight.dot(&dlogits);
            encoder::backward_into(&enc, enc_cfg, &out.tape, dpooled.view(), &mut enc_grads)?;
            pending += 1;
            if pending == tcfg.batch_size || step + 1 == order.len() {
                if pending > 1 {
                    let f = T::lit(1.0 / pending as f64);
                    scale_grads(&mut enc_grads, f);
                    scale_grads(&mut head_grads, f);
                }
                if let Some(c) = tcfg.clip_norm {
                    clip_grad_norm(&mut [&mut enc_grads, &mut head_grads], c);
                }
                updates += 1;
                opt.set_learning_rate(
                    tcfg.learning_rate * tcfg.schedule.factor(updates, total_updates),
                );
                opt.step(&mut [&mut enc, &mut head], &[&enc_grads, &head_grads]);
                zero_grads(&mut enc_grads);
                zero_grads(&mut head_grads);
                pending = 0;
            }
        }
        history.push(EpochStats {
            epoch,
            mean_loss: total / order.len() as f64,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(SopModel {
        config: enc_cfg.clone(),
        encoder: enc,
        head,
        max_len: tcfg.max_len,
        history,
    })
}

/// Order-prediction pretraining over every conversation; returns only the
/// encoder. Conversations with fewer than two utterances contribute nothing,
/// and with no pairs at all the result equals `init_params(enc_cfg)`.
pub fn sop_pretrain<T: Scalar>(
    convs: &[Conversation],
    vocab: &Vocab,
    enc_cfg: &EncoderConfig,
    tcfg: &TrainConfig,
) -> Result<EncoderParams<T>, ClassifyError> {
    let pairs: Vec<SopPair> = convs.iter().flat_map(sop_pairs).collect();
    Ok(sop_train(&pairs, vocab, enc_cfg, tcfg)?.encoder)
}
