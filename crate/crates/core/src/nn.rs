//! Layer building blocks shared by the backbone and the heads.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running-stat updates are collected.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// One forward pass: the tape, a read-only parameter snapshot and the mode.
pub struct Ctx<'a, T> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    param_vars: Vec<Option<Var>>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            mode,
            param_vars: vec![None; store.len()],
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    /// Leaf for a parameter; repeated uses share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let v = self.graph.param(self.store, id);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars[id.index()]
    }

    pub fn into_parts(self) -> (Graph<T>, Vec<BnUpdate<T>>) {
        (self.graph, self.bn_updates)
    }
}

/// Folds batch statistics into running averages.
pub fn apply_bn_updates<T: Real>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::lit(BN_MOMENTUM);
    for u in updates {
        for (r, &b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = m * *r + (T::one() - m) * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = m * *r + (T::one() - m) * b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    /// Same-padded square conv (`pad = kernel / 2`).
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.he_normal(
            format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            rng,
        );
        let bias = store.trainable(format!("{name}.bias"), Tensor::vector(vec![T::zero(); out_channels]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            in_channels,
            out_channels,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv2d(x, w, Some(b), self.stride, self.kernel / 2)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.trainable(format!("{name}.gamma"), Tensor::vector(vec![T::one(); channels])),
            beta: store.trainable(format!("{name}.beta"), Tensor::vector(vec![T::zero(); channels])),
            running_mean: store.buffer(format!("{name}.running_mean"), Tensor::vector(vec![T::zero(); channels])),
            running_var: store.buffer(format!("{name}.running_var"), Tensor::vector(vec![T::one(); channels])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.mode {
            Mode::Train => {
                let (y, mean, var) = ctx.graph.batch_norm_train(x, g, b)?;
                ctx.bn_updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let store = ctx.store;
                ctx.graph.batch_norm_eval(
                    x,
                    g,
                    b,
                    store.get(self.running_mean),
                    store.get(self.running_var),
                )
            }
        }
    }
}

/// conv → batch norm → leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnAct {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBnAct {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, kernel, stride),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_channels),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.leaky_relu(y, T::lit(LEAKY_SLOPE)))
    }
}

/// batch norm → leaky ReLU, the pre-activation used inside dense layers.
pub fn bn_act<T: Real>(bn: &BatchNorm, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let y = bn.forward(ctx, x)?;
    Ok(ctx.graph.leaky_relu(y, T::lit(LEAKY_SLOPE)))
}
