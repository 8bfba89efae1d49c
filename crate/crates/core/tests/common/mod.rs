//! Shared helpers for the integration tests: a central finite-difference
//! gradient oracle that only ever calls forward passes.
#![allow(dead_code)]

use adcofe::classify::{head_forward, head_loss_and_grads, loss_xent, HeadParams};
use adcofe::corpus::EmotionLabel;
use adcofe::encoder::{self, EncoderConfig, EncoderParams};
use adcofe::textprep::EncodedSequence;
use ndarray::{Array1, ArrayViewMutD};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Denominator floor so coordinates with (near) zero gradient compare on an
/// absolute scale.
pub const REL_FLOOR: f64 = 1e-6;
pub const COORDS_PER_TENSOR: usize = 100;

#[derive(Debug, Default)]
pub struct GradCheckSummary {
    pub checked: usize,
    pub tensors: usize,
    pub worst_rel_err: f64,
    pub worst_at: String,
}

impl GradCheckSummary {
    fn record(&mut self, name: &str, flat: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.checked += 1;
        if err > self.worst_rel_err || self.worst_at.is_empty() {
            self.worst_rel_err = err;
            self.worst_at = format!("{name}[{flat}] analytic={analytic:.6e} numeric={numeric:.6e}");
        }
    }
}

pub fn gradcheck_config(layers: usize) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 12,
        embed_dim: 8,
        hidden_dim: 16,
        layers,
        heads: 2,
        groups: 1,
        ff_dim: 32,
        max_positions: 5,
        seed: 11,
    }
}

/// Five positions over two segments with the final one padded.
pub fn gradcheck_sequence() -> EncodedSequence {
    EncodedSequence {
        input_ids: vec![2, 7, 3, 9, 0],
        mask: vec![1, 1, 1, 1, 0],
        segment_ids: vec![0, 0, 0, 1, 0],
    }
}

fn nth_mut<'a>(
    views: &'a mut [(&'static str, ArrayViewMutD<'_, f64>)],
    tensor: usize,
    flat: usize,
) -> &'a mut f64 {
    views[tensor]
        .1
        .iter_mut()
        .nth(flat)
        .expect("coordinate in range")
}

fn coordinates(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if len <= COORDS_PER_TENSOR {
        (0..len).collect()
    } else {
        sample(rng, len, COORDS_PER_TENSOR).into_vec()
    }
}

/// Perturbs every coordinate chosen from each tensor of `params` and compares
/// `(f(p+ε) − f(p−ε)) / 2ε` against `analytic`.
fn compare<P>(
    params: &mut P,
    analytic: &P,
    views: impl Fn(&P) -> Vec<(&'static str, ndarray::ArrayViewD<'_, f64>)>,
    views_mut: impl Fn(&mut P) -> Vec<(&'static str, ArrayViewMutD<'_, f64>)>,
    loss: impl Fn(&P) -> f64,
    rng: &mut ChaCha8Rng,
    summary: &mut GradCheckSummary,
) {
    let shapes: Vec<(&'static str, usize)> =
        views(params).iter().map(|(n, v)| (*n, v.len())).collect();
    let grads: Vec<Vec<f64>> = views(analytic)
        .iter()
        .map(|(_, v)| v.iter().copied().collect())
        .collect();
    for (ti, &(name, len)) in shapes.iter().enumerate() {
        summary.tensors += 1;
        for flat in coordinates(len, rng) {
            let orig = *nth_mut(&mut views_mut(params), ti, flat);
            *nth_mut(&mut views_mut(params), ti, flat) = orig + FD_EPS;
            let up = loss(params);
            *nth_mut(&mut views_mut(params), ti, flat) = orig - FD_EPS;
            let down = loss(params);
            *nth_mut(&mut views_mut(params), ti, flat) = orig;
            summary.record(name, flat, grads[ti][flat], (up - down) / (2.0 * FD_EPS));
        }
    }
}

/// Checks encoder gradients for the scalar objective `w · pooled` with a
/// random `w`.
pub fn check_encoder_gradients(layers: usize, seed: u64) -> GradCheckSummary {
    let cfg = gradcheck_config(layers);
    let seq = gradcheck_sequence();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: EncoderParams<f64> = encoder::init_params(&cfg).unwrap();
    // Perturb gains and biases away from their 1/0 initialisation so every
    // path carries signal.
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|x| x + rng.gen_range(-0.2..0.2));
    }
    let w: Array1<f64> = (0..cfg.hidden_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let out = encoder::forward(&params, &cfg, &seq).unwrap();
    let analytic = encoder::backward(&params, &cfg, &out.tape, w.view()).unwrap();
    let objective =
        |p: &EncoderParams<f64>| encoder::forward(p, &cfg, &seq).unwrap().pooled.dot(&w);
    let mut summary = GradCheckSummary::default();
    compare(
        &mut params,
        &analytic,
        |p| p.tensors(),
        |p| p.tensors_mut(),
        objective,
        &mut rng,
        &mut summary,
    );
    summary
}

/// Checks head gradients, including the returned input gradient, for the
/// cross-entropy loss.
pub fn check_head_gradients(seed: u64) -> GradCheckSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input_dim = 16;
    let mut head = HeadParams::<f64>::init(input_dim, &mut rng);
    for (_, mut t) in head.tensors_mut() {
        t.mapv_inplace(|x| x + rng.gen_range(-0.1..0.1));
    }
    let pooled: Array1<f64> = (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let gold = EmotionLabel::Angry;
    let mut analytic = HeadParams::zeros(input_dim);
    let (_, dpooled) = head_loss_and_grads(&head, pooled.view(), gold, &mut analytic).unwrap();
    let loss_at = |h: &HeadParams<f64>, x: &Array1<f64>| {
        loss_xent(&head_forward(h, x.view()).unwrap().0, gold)
    };

    let mut summary = GradCheckSummary::default();
    compare(
        &mut head,
        &analytic,
        |p| p.tensors(),
        |p| p.tensors_mut(),
        |h| loss_at(h, &pooled),
        &mut rng,
        &mut summary,
    );
    summary.tensors += 1;
    for i in 0..input_dim {
        let mut up = pooled.clone();
        up[i] += FD_EPS;
        let mut down = pooled.clone();
        down[i] -= FD_EPS;
        let numeric = (loss_at(&head, &up) - loss_at(&head, &down)) / (2.0 * FD_EPS);
        summary.record("head.input", i, dpooled[i], numeric);
    }
    summary
}

/// From-definition per-class scores, computed by walking individual
/// (gold, predicted) pairs. F1 uses 2TP / (2TP + FP + FN).
#[derive(Debug)]
pub struct OracleScores {
    pub recall: [f64; 6],
    pub precision: [f64; 6],
    pub f1: [f64; 6],
    pub support: [u64; 6],
    pub accuracy: f64,
    pub weighted_f1: f64,
}

pub fn oracle_scores(pairs: &[(usize, usize)]) -> OracleScores {
    let mut s = OracleScores {
        recall: [0.0; 6],
        precision: [0.0; 6],
        f1: [0.0; 6],
        support: [0; 6],
        accuracy: 0.0,
        weighted_f1: 0.0,
    };
    let mut correct = 0u64;
    for c in 0..6 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for &(g, p) in pairs {
            match (g == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                (false, false) => {}
            }
        }
        correct += tp;
        s.support[c] = tp + fn_;
        if tp + fn_ > 0 {
            s.recall[c] = tp as f64 / (tp + fn_) as f64;
        }
        if tp + fp > 0 {
            s.precision[c] = tp as f64 / (tp + fp) as f64;
        }
        if tp > 0 {
            s.f1[c] = (2 * tp) as f64 / (2 * tp + fp + fn_) as f64;
        }
    }
    if !pairs.is_empty() {
        let n = pairs.len() as f64;
        s.accuracy = correct as f64 / n;
        s.weighted_f1 = (0..6).map(|c| s.support[c] as f64 / n * s.f1[c]).sum();
    }
    s
}

/// A random 6×6 count matrix; roughly one row in five is left empty so
/// zero-support classes are exercised.
pub fn random_counts(rng: &mut impl Rng) -> [[u64; 6]; 6] {
    let mut counts = [[0u64; 6]; 6];
    for row in counts.iter_mut() {
        if rng.gen_bool(0.2) {
            continue;
        }
        for cell in row.iter_mut() {
            *cell = rng.gen_range(0..15);
        }
    }
    if counts.iter().flatten().all(|&c| c == 0) {
        counts[0][0] = 1;
    }
    counts
}

pub fn expand_pairs(counts: &[[u64; 6]; 6]) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for (g, row) in counts.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            pairs.extend(std::iter::repeat_n((g, p), n as usize));
        }
    }
    pairs
}
