//! Dense-connection feature extractor.
//!
//! Layout: two 3×3 stem convs (the second strided), a 2×2 max pool and a
//! transition bring the input to stride 8; three dense blocks separated by
//! transitions follow. The three block outputs are the feature taps at
//! strides 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{invalid, Error, Result};
use crate::nn::{bn_act, BatchNorm, Conv, ConvBnAct, Ctx};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub growth_rate: usize,
    pub layers_per_block: [usize; 3],
    pub input_size: usize,
}

impl BackboneConfig {
    pub const fn desk() -> Self {
        Self {
            stem_channels: 16,
            growth_rate: 8,
            layers_per_block: [4, 4, 4],
            input_size: 64,
        }
    }

    /// DenseNet-201-sized first three blocks at 416×416.
    pub const fn paper_scale() -> Self {
        Self {
            stem_channels: 64,
            growth_rate: 32,
            layers_per_block: [6, 12, 48],
            input_size: 416,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(invalid(
                "backbone",
                format!("input_size {} must be a positive multiple of 32", self.input_size),
            ));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 {
            return Err(invalid("backbone", "growth_rate and stem_channels must be >= 1"));
        }
        if self.layers_per_block.contains(&0) {
            return Err(invalid("backbone", "every dense block needs at least one layer"));
        }
        Ok(())
    }

    /// Channel counts of the three taps (stride 8, 16, 32).
    pub fn tap_channels(&self) -> [usize; 3] {
        let mut c = self.stem_channels;
        let mut out = [0; 3];
        for (b, &layers) in self.layers_per_block.iter().enumerate() {
            c += layers * self.growth_rate;
            out[b] = c;
            c = transition_width(c);
        }
        out
    }
}

/// DenseNet compression 0.5.
pub fn transition_width(c: usize) -> usize {
    (c / 2).max(1)
}

/// Parameter count of `depth` stacked k×k convs at constant width, biases excluded.
pub fn stacked_conv_params(channels: usize, kernel: usize, depth: usize) -> usize {
    depth * channels * channels * kernel * kernel
}

#[derive(Debug, Clone)]
pub struct FeatureTaps {
    /// stride 8
    pub large: Var,
    /// stride 16
    pub mid: Var,
    /// stride 32
    pub small: Var,
}

/// BN → leaky → 1×1 bottleneck (4·growth) → BN → leaky → 3×3 (growth), concatenated onto the input.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub bn1: BatchNorm,
    pub bottleneck: Conv,
    pub bn2: BatchNorm,
    pub conv: Conv,
}

impl DenseLayer {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        growth: usize,
    ) -> Self {
        Self {
            bn1: BatchNorm::new(store, &format!("{name}.bn1"), in_channels),
            bottleneck: Conv::new(store, rng, &format!("{name}.bottleneck"), in_channels, 4 * growth, 1, 1),
            bn2: BatchNorm::new(store, &format!("{name}.bn2"), 4 * growth),
            conv: Conv::new(store, rng, &format!("{name}.conv"), 4 * growth, growth, 3, 1),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = bn_act(&self.bn1, ctx, x)?;
        let h = self.bottleneck.forward(ctx, h)?;
        let h = bn_act(&self.bn2, ctx, h)?;
        let h = self.conv.forward(ctx, h)?;
        ctx.graph.concat(x, h)
    }

    pub fn out_channels(&self) -> usize {
        self.bn1_channels() + self.conv.out_channels
    }

    fn bn1_channels(&self) -> usize {
        self.bottleneck.in_channels
    }
}

#[derive(Debug, Clone)]
pub struct DenseBlock {
    pub layers: Vec<DenseLayer>,
    pub in_channels: usize,
    pub growth: usize,
}

impl DenseBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        growth: usize,
        depth: usize,
    ) -> Self {
        let layers = (0..depth)
            .map(|l| DenseLayer::new(store, rng, &format!("{name}.layer{l}"), in_channels + l * growth, growth))
            .collect();
        Self {
            layers,
            in_channels,
            growth,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.in_channels + self.layers.len() * self.growth
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(ctx, h))
    }
}

/// 1×1 conv then 2×2 stride-2 max pool.
#[derive(Debug, Clone)]
pub struct Transition {
    pub conv: Conv,
}

impl Transition {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
    ) -> Self {
        Self {
            conv: Conv::new(store, rng, &format!("{name}.conv"), in_channels, out_channels, 1, 1),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        ctx.graph.max_pool(y, 2, 2, 0)
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: [ConvBnAct; 2],
    pub stem_transition: Transition,
    pub blocks: [DenseBlock; 3],
    pub transitions: [Transition; 2],
}

impl Backbone {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.stem_channels;
        let g = cfg.growth_rate;
        let stem = [
            ConvBnAct::new(store, rng, "backbone.stem0", 3, s, 3, 1),
            ConvBnAct::new(store, rng, "backbone.stem1", s, s, 3, 2),
        ];
        let stem_transition = Transition::new(store, rng, "backbone.stem_transition", s, s);
        let b0 = DenseBlock::new(store, rng, "backbone.block0", s, g, cfg.layers_per_block[0]);
        let t0 = Transition::new(
            store,
            rng,
            "backbone.transition0",
            b0.out_channels(),
            transition_width(b0.out_channels()),
        );
        let b1 = DenseBlock::new(
            store,
            rng,
            "backbone.block1",
            transition_width(b0.out_channels()),
            g,
            cfg.layers_per_block[1],
        );
        let t1 = Transition::new(
            store,
            rng,
            "backbone.transition1",
            b1.out_channels(),
            transition_width(b1.out_channels()),
        );
        let b2 = DenseBlock::new(
            store,
            rng,
            "backbone.block2",
            transition_width(b1.out_channels()),
            g,
            cfg.layers_per_block[2],
        );
        Ok(Self {
            cfg,
            stem,
            stem_transition,
            blocks: [b0, b1, b2],
            transitions: [t0, t1],
        })
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<FeatureTaps> {
        let s = ctx.graph.shape(image);
        let size = self.cfg.input_size;
        if s.c != 3 || s.h != size || s.w != size {
            return Err(Error::ShapeMismatch {
                op: "backbone",
                lhs: s,
                rhs: Shape::new(s.n, 3, size, size),
            });
        }
        let x = self.stem[0].forward(ctx, image)?;
        let x = self.stem[1].forward(ctx, x)?;
        let x = ctx.graph.max_pool(x, 2, 2, 0)?;
        let x = self.stem_transition.forward(ctx, x)?;
        let large = self.blocks[0].forward(ctx, x)?;
        let x = self.transitions[0].forward(ctx, large)?;
        let mid = self.blocks[1].forward(ctx, x)?;
        let x = self.transitions[1].forward(ctx, mid)?;
        let small = self.blocks[2].forward(ctx, x)?;
        Ok(FeatureTaps { large, mid, small })
    }
}
