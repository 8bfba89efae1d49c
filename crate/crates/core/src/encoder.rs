//! Small ALBERT-style transformer encoder with hand-written backpropagation.
//!
//! Token embeddings live in a narrow space of width `embed_dim` and are
//! projected up to `hidden_dim`. A single transformer layer is applied
//! `layers` times, so the parameter count does not depend on depth and the
//! shared layer's gradient is the sum over every application.
//!
//! Layers use pre-layer-norm residual blocks:
//!
//! ```text
//! x <- x + Attention(LN1(x))
//! x <- x + W2 · gelu(W1 · LN2(x))
//! ```
//!
//! The stack ends with one more layer norm, whose output is the hidden state
//! returned to callers and fed to the pooler.
//!
//! Padding positions are excluded from every softmax, so appending padding
//! never changes the hidden states of real tokens.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;
use crate::textprep::EncodedSequence;

const LAYER_NORM_EPS: f64 = 1e-12;
const SEGMENT_TYPES: usize = 2;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(&'static str),
    #[error("sequence length {len} exceeds max positions {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("segment id {0} out of range (only 0 and 1 are embedded)")]
    SegmentOutOfRange(u32),
    #[error("malformed sequence: {0}")]
    BadSequence(&'static str),
    #[error("tape does not match parameters: {0}")]
    TapeMismatch(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub groups: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 2000,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 4,
            heads: 4,
            groups: 1,
            ff_dim: 128,
            max_positions: 128,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// Dimensions of the base pretrained configuration (12 layers, 12 heads,
    /// 128-wide embeddings projected to 768).
    pub fn full_scale() -> Self {
        EncoderConfig {
            vocab_size: 30_000,
            embed_dim: 128,
            hidden_dim: 768,
            layers: 12,
            heads: 12,
            groups: 1,
            ff_dim: 3072,
            max_positions: 512,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |msg| Err(EncoderError::InvalidConfig(msg));
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("vocab_size, embed_dim and hidden_dim must be positive");
        }
        if self.layers == 0 || self.heads == 0 || self.ff_dim == 0 || self.max_positions == 0 {
            return bad("layers, heads, ff_dim and max_positions must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("H divisible by A");
        }
        if self.embed_dim > self.hidden_dim {
            return bad("E <= H");
        }
        if self.groups != 1 {
            return bad("G = 1 (only a single shared parameter group is supported)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Parameters of the factorized embedding block: `V·E + E·H`.
pub fn embedding_block_params(cfg: &EncoderConfig) -> u64 {
    (cfg.vocab_size * cfg.embed_dim + cfg.embed_dim * cfg.hidden_dim) as u64
}

/// What the embedding block would cost with embeddings tied to the hidden size.
pub fn untied_embedding_params(cfg: &EncoderConfig) -> u64 {
    (cfg.vocab_size * cfg.hidden_dim) as u64
}

/// Exact number of learnable scalars. The shared layer is counted once.
pub fn count_params(cfg: &EncoderConfig) -> u64 {
    let (h, f, p) = (
        cfg.hidden_dim as u64,
        cfg.ff_dim as u64,
        cfg.max_positions as u64,
    );
    let embeddings = embedding_block_params(cfg) + p * h + SEGMENT_TYPES as u64 * h;
    let attention = 4 * (h * h + h);
    let feedforward = h * f + f + f * h + h;
    let norms = 3 * 2 * h;
    let pooler = h * h + h;
    embeddings + attention + feedforward + norms + pooler
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    pub gain: Array1<T>,
    pub bias: Array1<T>,
}

/// The one transformer layer reused at every depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedLayer<T> {
    pub wq: Array2<T>,
    pub bq: Array1<T>,
    pub wk: Array2<T>,
    pub bk: Array1<T>,
    pub wv: Array2<T>,
    pub bv: Array1<T>,
    pub wo: Array2<T>,
    pub bo: Array1<T>,
    pub w1: Array2<T>,
    pub b1: Array1<T>,
    pub w2: Array2<T>,
    pub b2: Array1<T>,
    pub ln1: LayerNormParams<T>,
    pub ln2: LayerNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T> {
    pub token_embed: Array2<T>,
    pub embed_proj: Array2<T>,
    pub position_embed: Array2<T>,
    pub segment_embed: Array2<T>,
    pub shared_layer: SharedLayer<T>,
    pub final_ln: LayerNormParams<T>,
    pub pooler_w: Array2<T>,
    pub pooler_b: Array1<T>,
}

/// Gradients share the parameter layout.
pub type EncoderGrads<T> = EncoderParams<T>;

macro_rules! encoder_tensors {
    ($self:ident, $view:ident) => {
        vec![
            ("embed.token", $self.token_embed.$view().into_dyn()),
            ("embed.proj", $self.embed_proj.$view().into_dyn()),
            ("embed.position", $self.position_embed.$view().into_dyn()),
            ("embed.segment", $self.segment_embed.$view().into_dyn()),
            ("layer.attn.wq", $self.shared_layer.wq.$view().into_dyn()),
            ("layer.attn.bq", $self.shared_layer.bq.$view().into_dyn()),
            ("layer.attn.wk", $self.shared_layer.wk.$view().into_dyn()),
            ("layer.attn.bk", $self.shared_layer.bk.$view().into_dyn()),
            ("layer.attn.wv", $self.shared_layer.wv.$view().into_dyn()),
            ("layer.attn.bv", $self.shared_layer.bv.$view().into_dyn()),
            ("layer.attn.wo", $self.shared_layer.wo.$view().into_dyn()),
            ("layer.attn.bo", $self.shared_layer.bo.$view().into_dyn()),
            ("layer.ffn.w1", $self.shared_layer.w1.$view().into_dyn()),
            ("layer.ffn.b1", $self.shared_layer.b1.$view().into_dyn()),
            ("layer.ffn.w2", $self.shared_layer.w2.$view().into_dyn()),
            ("layer.ffn.b2", $self.shared_layer.b2.$view().into_dyn()),
            (
                "layer.ln1.gain",
                $self.shared_layer.ln1.gain.$view().into_dyn(),
            ),
            (
                "layer.ln1.bias",
                $self.shared_layer.ln1.bias.$view().into_dyn(),
            ),
            (
                "layer.ln2.gain",
                $self.shared_layer.ln2.gain.$view().into_dyn(),
            ),
            (
                "layer.ln2.bias",
                $self.shared_layer.ln2.bias.$view().into_dyn(),
            ),
            ("final_ln.gain", $self.final_ln.gain.$view().into_dyn()),
            ("final_ln.bias", $self.final_ln.bias.$view().into_dyn()),
            ("pooler.weight", $self.pooler_w.$view().into_dyn()),
            ("pooler.bias", $self.pooler_b.$view().into_dyn()),
        ]
    };
}

impl<T: Scalar> EncoderParams<T> {
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let (v, e, h, f, p) = (
            cfg.vocab_size,
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.ff_dim,
            cfg.max_positions,
        );
        let m = |r, c| Array2::zeros((r, c));
        let b = |n| Array1::zeros(n);
        EncoderParams {
            token_embed: m(v, e),
            embed_proj: m(e, h),
            position_embed: m(p, h),
            segment_embed: m(SEGMENT_TYPES, h),
            shared_layer: SharedLayer {
                wq: m(h, h),
                bq: b(h),
                wk: m(h, h),
                bk: b(h),
                wv: m(h, h),
                bv: b(h),
                wo: m(h, h),
                bo: b(h),
                w1: m(h, f),
                b1: b(f),
                w2: m(f, h),
                b2: b(h),
                ln1: LayerNormParams {
                    gain: b(h),
                    bias: b(h),
                },
                ln2: LayerNormParams {
                    gain: b(h),
                    bias: b(h),
                },
            },
            final_ln: LayerNormParams {
                gain: b(h),
                bias: b(h),
            },
            pooler_w: m(h, h),
            pooler_b: b(h),
        }
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        encoder_tensors!(self, view)
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        encoder_tensors!(self, view_mut)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(T::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    /// Infers the dimensions these tensors were built for.
    pub fn dims(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.token_embed.nrows(),
            self.token_embed.ncols(),
            self.embed_proj.ncols(),
            self.shared_layer.w1.ncols(),
            self.position_embed.nrows(),
        )
    }

    fn matches(&self, cfg: &EncoderConfig) -> bool {
        self.dims()
            == (
                cfg.vocab_size,
                cfg.embed_dim,
                cfg.hidden_dim,
                cfg.ff_dim,
                cfg.max_positions,
            )
    }
}

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, drawn row-major.
fn fill_uniform<T: Scalar, R: Rng>(rng: &mut R, a: &mut Array2<T>, fan_in: usize) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    a.iter_mut()
        .for_each(|x| *x = T::lit(rng.gen_range(-bound..=bound)));
}

/// Random initial parameters, reproducible from `cfg.seed`.
pub fn init_params<T: Scalar>(cfg: &EncoderConfig) -> Result<EncoderParams<T>, EncoderError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = EncoderParams::zeros(cfg);
    let (e, h, f) = (cfg.embed_dim, cfg.hidden_dim, cfg.ff_dim);
    fill_uniform(&mut rng, &mut p.token_embed, e);
    fill_uniform(&mut rng, &mut p.embed_proj, e);
    fill_uniform(&mut rng, &mut p.position_embed, h);
    fill_uniform(&mut rng, &mut p.segment_embed, h);
    let l = &mut p.shared_layer;
    for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
        fill_uniform(&mut rng, w, h);
    }
    fill_uniform(&mut rng, &mut l.w1, h);
    fill_uniform(&mut rng, &mut l.w2, f);
    l.ln1.gain.fill(T::one());
    l.ln2.gain.fill(T::one());
    p.final_ln.gain.fill(T::one());
    fill_uniform(&mut rng, &mut p.pooler_w, h);
    Ok(p)
}

struct LnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

fn layer_norm<T: Scalar>(x: &Array2<T>, ln: &LayerNormParams<T>) -> (Array2<T>, LnCache<T>) {
    let n = T::lit(x.ncols() as f64);
    let eps = T::lit(LAYER_NORM_EPS);
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<T>() / n;
        *inv = T::one() / (var + eps).sqrt();
        let i = *inv;
        row.mapv_inplace(|v| v * i);
    }
    let y = &xhat * &ln.gain + &ln.bias;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward<T: Scalar>(
    dy: &Array2<T>,
    cache: &LnCache<T>,
    ln: &LayerNormParams<T>,
    grads: &mut LayerNormParams<T>,
) -> Array2<T> {
    grads.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
    grads.bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gain;
    let n = T::lit(dy.ncols() as f64);
    let mut dx = Array2::zeros(dy.raw_dim());
    Zip::from(dx.rows_mut())
        .and(dxhat.rows())
        .and(cache.xhat.rows())
        .and(&cache.inv_std)
        .for_each(|mut out, g, xh, &inv| {
            let sum_g = g.sum();
            let sum_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut out)
                .and(g)
                .and(xh)
                .for_each(|o, &gi, &xi| *o = inv / n * (n * gi - sum_g - xi * sum_gx));
        });
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::lit(GELU_C), T::lit(GELU_K), T::lit(0.5));
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn affine<T: Scalar>(x: &Array2<T>, w: &Array2<T>, b: &Array1<T>) -> Array2<T> {
    x.dot(w) + b
}

/// Row softmax over the unmasked columns; masked columns get weight 0.
fn masked_softmax_rows<T: Scalar>(scores: &mut Array2<T>, key_mask: &[bool]) {
    for mut row in scores.rows_mut() {
        let max = row
            .iter()
            .zip(key_mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (v, &m) in row.iter_mut().zip(key_mask) {
            *v = if m { (*v - max).exp() } else { T::zero() };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

/// Activations of one application of the shared layer.
pub struct LayerTape<T> {
    ln1: LnCache<T>,
    a: Array2<T>,
    q: Array2<T>,
    k: Array2<T>,
    v: Array2<T>,
    probs: Vec<Array2<T>>,
    ctx: Array2<T>,
    ln2: LnCache<T>,
    b: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

impl<T> LayerTape<T> {
    /// Attention weights of each head, `T×T`, rows over keys.
    pub fn attention(&self) -> &[Array2<T>] {
        &self.probs
    }
}

/// Everything `backward` needs from a forward pass.
pub struct Tape<T> {
    ids: Vec<usize>,
    segments: Vec<usize>,
    token_rows: Array2<T>,
    layers: Vec<LayerTape<T>>,
    final_ln: LnCache<T>,
    hidden: Array2<T>,
    pooled: Array1<T>,
}

impl<T> Tape<T> {
    pub fn layers(&self) -> &[LayerTape<T>] {
        &self.layers
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

pub struct EncoderOutput<T> {
    /// `T×H` final hidden states.
    pub hidden: Array2<T>,
    /// `tanh(hidden[0]·Wp + bp)`.
    pub pooled: Array1<T>,
    pub tape: Tape<T>,
}

fn layer_forward<T: Scalar>(
    x: &Array2<T>,
    l: &SharedLayer<T>,
    cfg: &EncoderConfig,
    key_mask: &[bool],
) -> (Array2<T>, LayerTape<T>) {
    let d = cfg.head_dim();
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let (a, ln1) = layer_norm(x, &l.ln1);
    let q = affine(&a, &l.wq, &l.bq);
    let k = affine(&a, &l.wk, &l.bk);
    let v = affine(&a, &l.wv, &l.bv);
    let mut ctx = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let cols = s![.., h * d..(h + 1) * d];
        let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        masked_softmax_rows(&mut scores, key_mask);
        ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        probs.push(scores);
    }
    let x_mid = x + &affine(&ctx, &l.wo, &l.bo);
    let (b, ln2) = layer_norm(&x_mid, &l.ln2);
    let u = affine(&b, &l.w1, &l.b1);
    let g = u.mapv(gelu);
    let out = &x_mid + &affine(&g, &l.w2, &l.b2);
    let tape = LayerTape {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b,
        u,
        g,
    };
    (out, tape)
}

fn validate_sequence(cfg: &EncoderConfig, seq: &EncodedSequence) -> Result<(), EncoderError> {
    let t = seq.input_ids.len();
    if t == 0 {
        return Err(EncoderError::BadSequence("empty sequence"));
    }
    if seq.mask.len() != t || seq.segment_ids.len() != t {
        return Err(EncoderError::BadSequence(
            "ids, mask and segments differ in length",
        ));
    }
    if seq.mask[0] != 1 {
        return Err(EncoderError::BadSequence("first position must be unmasked"));
    }
    if t > cfg.max_positions {
        return Err(EncoderError::TooLong {
            len: t,
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = seq
        .input_ids
        .iter()
        .find(|&&id| id as usize >= cfg.vocab_size)
    {
        return Err(EncoderError::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    if let Some(&s) = seq
        .segment_ids
        .iter()
        .find(|&&s| s as usize >= SEGMENT_TYPES)
    {
        return Err(EncoderError::SegmentOutOfRange(s));
    }
    Ok(())
}

pub fn forward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    seq: &EncodedSequence,
) -> Result<EncoderOutput<T>, EncoderError> {
    cfg.validate()?;
    if !params.matches(cfg) {
        return Err(EncoderError::TapeMismatch(
            "parameter shapes differ from config",
        ));
    }
    validate_sequence(cfg, seq)?;
    let t = seq.input_ids.len();
    let ids: Vec<usize> = seq.input_ids.iter().map(|&i| i as usize).collect();
    let segments: Vec<usize> = seq.segment_ids.iter().map(|&s| s as usize).collect();
    let key_mask: Vec<bool> = seq.mask.iter().map(|&m| m == 1).collect();

    let token_rows = params.token_embed.select(Axis(0), &ids);
    let mut x = token_rows.dot(&params.embed_proj);
    x += &params.position_embed.slice(s![..t, ..]);
    x += &params.segment_embed.select(Axis(0), &segments);

    let mut layers = Vec::with_capacity(cfg.layers);
    for _ in 0..cfg.layers {
        let (next, tape) = layer_forward(&x, &params.shared_layer, cfg, &key_mask);
        layers.push(tape);
        x = next;
    }
    let (x, final_ln) = layer_norm(&x, &params.final_ln);
    let pooled = (x.row(0).dot(&params.pooler_w) + &params.pooler_b).mapv(T::tanh);
    Ok(EncoderOutput {
        hidden: x.clone(),
        pooled: pooled.clone(),
        tape: Tape {
            ids,
            segments,
            token_rows,
            layers,
            final_ln,
            hidden: x,
            pooled,
        },
    })
}

fn outer_add<T: Scalar>(acc: &mut Array2<T>, a: ArrayView1<T>, b: ArrayView1<T>) {
    Zip::from(acc.rows_mut()).and(&a).for_each(|mut row, &ai| {
        row.scaled_add(ai, &b);
    });
}

fn affine_backward<T: Scalar>(
    x: ArrayView2<T>,
    dy: &Array2<T>,
    w: &Array2<T>,
    dw: &mut Array2<T>,
    db: &mut Array1<T>,
) -> Array2<T> {
    *dw += &x.t().dot(dy);
    *db += &dy.sum_axis(Axis(0));
    dy.dot(&w.t())
}

fn layer_backward<T: Scalar>(
    dout: Array2<T>,
    tape: &LayerTape<T>,
    l: &SharedLayer<T>,
    g: &mut SharedLayer<T>,
    cfg: &EncoderConfig,
) -> Array2<T> {
    let d = cfg.head_dim();
    let scale = T::lit(1.0 / (d as f64).sqrt());

    // feedforward block
    let dg = affine_backward(tape.g.view(), &dout, &l.w2, &mut g.w2, &mut g.b2);
    let mut du = dg;
    Zip::from(&mut du)
        .and(&tape.u)
        .for_each(|d, &u| *d *= gelu_grad(u));
    let db = affine_backward(tape.b.view(), &du, &l.w1, &mut g.w1, &mut g.b1);
    let dx_mid = dout + &layer_norm_backward(&db, &tape.ln2, &l.ln2, &mut g.ln2);

    // attention block
    let dctx = affine_backward(tape.ctx.view(), &dx_mid, &l.wo, &mut g.wo, &mut g.bo);
    let mut dq = Array2::zeros(tape.q.raw_dim());
    let mut dk = Array2::zeros(tape.k.raw_dim());
    let mut dv = Array2::zeros(tape.v.raw_dim());
    for (h, p) in tape.probs.iter().enumerate() {
        let cols = s![.., h * d..(h + 1) * d];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&tape.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        let mut ds = dp;
        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
            let dot = ds_row.iter().zip(p_row).map(|(&a, &b)| a * b).sum::<T>();
            Zip::from(&mut ds_row)
                .and(&p_row)
                .for_each(|s, &pv| *s = pv * (*s - dot) * scale);
        }
        dq.slice_mut(cols).assign(&ds.dot(&tape.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&tape.q.slice(cols)));
    }
    let mut da = affine_backward(tape.a.view(), &dq, &l.wq, &mut g.wq, &mut g.bq);
    da += &affine_backward(tape.a.view(), &dk, &l.wk, &mut g.wk, &mut g.bk);
    da += &affine_backward(tape.a.view(), &dv, &l.wv, &mut g.wv, &mut g.bv);
    dx_mid + &layer_norm_backward(&da, &tape.ln1, &l.ln1, &mut g.ln1)
}

/// Accumulates the gradient of `grad_pooled · pooled` into `grads`.
pub fn backward_into<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    tape: &Tape<T>,
    grad_pooled: ArrayView1<T>,
    grads: &mut EncoderGrads<T>,
) -> Result<(), EncoderError> {
    let h = cfg.hidden_dim;
    if !params.matches(cfg) || !grads.matches(cfg) {
        return Err(EncoderError::TapeMismatch(
            "parameter shapes differ from config",
        ));
    }
    if tape.layers.len() != cfg.layers {
        return Err(EncoderError::TapeMismatch("layer count differs"));
    }
    if tape.hidden.ncols() != h
        || grad_pooled.len() != h
        || tape.token_rows.ncols() != cfg.embed_dim
    {
        return Err(EncoderError::TapeMismatch("hidden size differs"));
    }

    // pooler
    let dz = Zip::from(&grad_pooled)
        .and(&tape.pooled)
        .map_collect(|&g, &p| g * (T::one() - p * p));
    outer_add(&mut grads.pooler_w, tape.hidden.row(0), dz.view());
    grads.pooler_b += &dz;
    let mut dx = Array2::zeros(tape.hidden.raw_dim());
    dx.row_mut(0).assign(&params.pooler_w.dot(&dz));
    dx = layer_norm_backward(&dx, &tape.final_ln, &params.final_ln, &mut grads.final_ln);

    for layer in tape.layers.iter().rev() {
        dx = layer_backward(
            dx,
            layer,
            &params.shared_layer,
            &mut grads.shared_layer,
            cfg,
        );
    }

    // embeddings
    let t = tape.ids.len();
    grads.embed_proj += &tape.token_rows.t().dot(&dx);
    let dtok = dx.dot(&params.embed_proj.t());
    for (row, &id) in dtok.rows().into_iter().zip(&tape.ids) {
        let mut target = grads.token_embed.row_mut(id);
        target += &row;
    }
    let mut dpos = grads.position_embed.slice_mut(s![..t, ..]);
    dpos += &dx;
    for (row, &seg) in dx.rows().into_iter().zip(&tape.segments) {
        let mut target = grads.segment_embed.row_mut(seg);
        target += &row;
    }
    Ok(())
}

pub fn backward<T: Scalar>(
    params: &EncoderParams<T>,
    cfg: &EncoderConfig,
    tape: &Tape<T>,
    grad_pooled: ArrayView1<T>,
) -> Result<EncoderGrads<T>, EncoderError> {
    let mut grads = EncoderParams::zeros(cfg);
    backward_into(params, cfg, tape, grad_pooled, &mut grads)?;
    Ok(grads)
}
