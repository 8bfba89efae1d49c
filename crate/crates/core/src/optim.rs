//! First-order optimizers over named tensor collections.

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use crate::classify::{HeadParams, SopHead};
use crate::encoder::EncoderParams;
use crate::scalar::Scalar;

/// A set of learnable tensors visited in a fixed order.
pub trait Parameters<T> {
    fn tensor_views(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)>;
    fn tensor_views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)>;
}

impl<T: Scalar> Parameters<T> for EncoderParams<T> {
    fn tensor_views(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        self.tensors()
    }
    fn tensor_views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        self.tensors_mut()
    }
}

impl<T: Scalar> Parameters<T> for HeadParams<T> {
    fn tensor_views(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        self.tensors()
    }
    fn tensor_views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        self.tensors_mut()
    }
}

impl<T: Scalar> Parameters<T> for SopHead<T> {
    fn tensor_views(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        self.tensors()
    }
    fn tensor_views_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        self.tensors_mut()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How the learning rate evolves over the course of a run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear ramp from zero over the first `warmup` fraction of steps, then
    /// linear decay to zero at the final step.
    WarmupLinear { warmup: f64 },
}

impl LrSchedule {
    /// Multiplier for step `step` (1-based) out of `total`.
    pub fn factor(self, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupLinear { warmup } => {
                let total = total.max(1) as f64;
                let t = step as f64;
                let w = (warmup * total).max(1.0);
                if t <= w {
                    t / w
                } else {
                    ((total - t + 1.0) / (total - w + 1.0)).clamp(0.0, 1.0)
                }
            }
        }
    }

    pub fn is_valid(self) -> bool {
        match self {
            LrSchedule::Constant => true,
            LrSchedule::WarmupLinear { warmup } => (0.0..1.0).contains(&warmup),
        }
    }
}

/// Optimizer state for a fixed sequence of parameter groups. The same groups
/// must be passed, in the same order, on every step.
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    first_moment: Vec<ArrayD<T>>,
    second_moment: Vec<ArrayD<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Optimizer {
            kind,
            lr: T::lit(learning_rate),
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = T::lit(lr);
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut dyn Parameters<T>], grads: &[&dyn Parameters<T>]) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient group count");
        self.step += 1;
        let grad_views: Vec<ArrayViewD<'_, T>> = grads
            .iter()
            .flat_map(|g| g.tensor_views().into_iter().map(|(_, v)| v))
            .collect();
        let mut param_views: Vec<ArrayViewMutD<'_, T>> = params
            .iter_mut()
            .flat_map(|p| p.tensor_views_mut().into_iter().map(|(_, v)| v))
            .collect();
        assert_eq!(param_views.len(), grad_views.len(), "tensor count");
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in param_views.iter_mut().zip(&grad_views) {
                    p.scaled_add(-self.lr, g);
                }
            }
            OptimizerKind::Adam => {
                if self.first_moment.is_empty() {
                    self.first_moment = grad_views
                        .iter()
                        .map(|g| ArrayD::zeros(g.raw_dim()))
                        .collect();
                    self.second_moment = self.first_moment.clone();
                }
                let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
                let one = T::one();
                let c1 = one - b1.powi(self.step);
                let c2 = one - b2.powi(self.step);
                let lr = self.lr;
                for (((p, g), m), v) in param_views
                    .iter_mut()
                    .zip(&grad_views)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                        *m = b1 * *m + (one - b1) * g;
                        *v = b2 * *v + (one - b2) * g * g;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [&mut dyn Parameters<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.tensor_views().into_iter())
        .map(|(_, t)| t.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            scale_grads(&mut **g, factor);
        }
    }
    norm
}

/// Multiplies every gradient tensor by `factor`.
pub fn scale_grads<T: Scalar>(grads: &mut dyn Parameters<T>, factor: T) {
    for (_, mut t) in grads.tensor_views_mut() {
        t.mapv_inplace(|x| x * factor);
    }
}

pub fn zero_grads<T: Scalar>(grads: &mut dyn Parameters<T>) {
    for (_, mut t) in grads.tensor_views_mut() {
        t.fill(T::zero());
    }
}
