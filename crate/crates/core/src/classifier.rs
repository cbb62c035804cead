//! Fire/Normal head: global average pooling, one dense unit, sigmoid.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{invalid, Result};
use crate::nn::Ctx;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierOutput {
    pub p_fire: f64,
}

impl ClassifierOutput {
    pub fn is_fire(&self, threshold: f64) -> bool {
        self.p_fire >= threshold
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ClassifierHead {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, in_channels: usize) -> Self {
        Self {
            weight: store.he_normal("classifier.fc.weight", Shape::new(1, in_channels, 1, 1), rng),
            bias: store.trainable("classifier.fc.bias", Tensor::vector(vec![T::zero()])),
        }
    }

    /// Returns the n×1×1×1 probability node.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, small_tap: Var) -> Result<Var> {
        let pooled = ctx.graph.global_avg_pool(small_tap);
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        let logits = ctx.graph.dense(pooled, w, b)?;
        Ok(ctx.graph.sigmoid(logits))
    }

    pub fn classify<T: Real>(&self, ctx: &mut Ctx<'_, T>, small_tap: Var) -> Result<Vec<ClassifierOutput>> {
        let p = self.forward(ctx, small_tap)?;
        Ok(ctx
            .graph
            .value(p)
            .data()
            .iter()
            .map(|v| ClassifierOutput {
                p_fire: v.to_f64_lossy(),
            })
            .collect())
    }
}

/// Binary cross-entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
pub fn classifier_loss<T: Real>(p_fire: T, label: bool) -> T {
    let p = clamp_prob(p_fire);
    if label {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// d/dp of [`classifier_loss`]; zero where the clamp is active.
pub fn classifier_loss_grad<T: Real>(p_fire: T, label: bool) -> T {
    let eps = T::lit(PROB_EPS);
    if p_fire < eps || p_fire > T::one() - eps {
        return T::zero();
    }
    if label {
        -T::one() / p_fire
    } else {
        T::one() / (T::one() - p_fire)
    }
}

pub fn clamp_prob<T: Real>(p: T) -> T {
    let eps = T::lit(PROB_EPS);
    p.max(eps).min(T::one() - eps)
}

/// Mean classifier loss over the batch, recorded on the tape.
pub fn batch_classifier_loss<T: Real>(ctx: &mut Ctx<'_, T>, probs: Var, labels: &[bool]) -> Result<Var> {
    let p = ctx.graph.value(probs).data().to_vec();
    if p.len() != labels.len() {
        return Err(invalid(
            "classifier_loss",
            format!("{} probabilities for {} labels", p.len(), labels.len()),
        ));
    }
    let n = T::from_usize_lossy(p.len());
    let value = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| classifier_loss(p, y))
        .sum::<T>()
        / n;
    let grads = p
        .iter()
        .zip(labels)
        .map(|(&p, &y)| classifier_loss_grad(p, y) / n)
        .collect();
    ctx.graph.scalar(value, vec![probs], vec![grads])
}
