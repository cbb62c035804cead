//! Assembled networks: the full detector/classifier and the 8×8 micro network
//! used for gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{Backbone, BackboneConfig, DenseLayer, FeatureTaps};
use crate::classifier::{ClassifierHead, ClassifierOutput};
use crate::detector::{decode, nms, spp, AnchorSet, Detection, DetectionHeads, Geometry, HeadBranch, ScaleGeom};
use crate::error::{invalid, Error, Result};
use crate::nn::{Ctx, Mode};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    /// Widest channel count inside each detection head.
    pub head_width: usize,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                backbone: BackboneConfig::desk(),
                head_width: 32,
            },
            Preset::PaperScale => Self {
                backbone: BackboneConfig::paper_scale(),
                head_width: 512,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head_width < 2 {
            return Err(invalid("model", "head_width must be >= 2"));
        }
        Ok(())
    }
}

/// Rebuilds the network described by `cfg` and fills it from a checkpoint.
pub fn load_network<T: Real>(cfg: ModelConfig, checkpoint: &std::path::Path) -> Result<(ParamStore<T>, Network)> {
    let mut store = ParamStore::new();
    let net = Network::new(&mut store, cfg, &AnchorSet::fallback(cfg.backbone.input_size), 0)?;
    store.load(checkpoint)?;
    Ok((store, net))
}

#[derive(Debug, Clone)]
pub struct Network {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub classifier: ClassifierHead,
    pub heads: DetectionHeads,
    /// 1×1×9×2 buffer holding the anchor priors so they travel with checkpoints.
    pub anchors: ParamId,
}

pub struct ForwardOut {
    pub taps: FeatureTaps,
    /// Coarse to fine.
    pub raws: [Var; 3],
}

impl Network {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ModelConfig, anchors: &AnchorSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::new(store, &mut rng, cfg.backbone)?;
        let taps = cfg.backbone.tap_channels();
        let classifier = ClassifierHead::new(store, &mut rng, taps[2]);
        let heads = DetectionHeads::new(store, &mut rng, taps, cfg.head_width);
        let anchors = store.buffer("anchors", anchors.to_tensor());
        Ok(Self {
            cfg,
            backbone,
            classifier,
            heads,
            anchors,
        })
    }

    pub fn input_size(&self) -> usize {
        self.cfg.backbone.input_size
    }

    pub fn anchor_set<T: Real>(&self, store: &ParamStore<T>) -> Result<AnchorSet> {
        AnchorSet::from_tensor(store.get(self.anchors))
    }

    pub fn geometry<T: Real>(&self, store: &ParamStore<T>) -> Result<Geometry> {
        Ok(Geometry::three_scale(self.input_size(), &self.anchor_set(store)?))
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<ForwardOut> {
        let taps = self.backbone.forward(ctx, images)?;
        let raw = self.heads.forward(ctx, &taps)?;
        Ok(ForwardOut { taps, raws: raw.scales })
    }

    /// Per-image detections after NMS.
    pub fn detect<T: Real>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
        conf_threshold: f64,
        nms_iou: f64,
    ) -> Result<Vec<Vec<Detection<T>>>> {
        let geom = self.geometry(store)?;
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.graph.input(images.clone());
        let out = self.forward(&mut ctx, x)?;
        let mut all = Vec::with_capacity(images.shape().n);
        for b in 0..images.shape().n {
            let mut dets = Vec::new();
            for (raw, sc) in out.raws.iter().zip(&geom.scales) {
                dets.extend(decode(ctx.graph.value(*raw), b, sc, geom.input_size, conf_threshold)?);
            }
            for d in &dets {
                if !d.bbox.is_finite() {
                    return Err(Error::NonFinite { component: "detect" });
                }
            }
            all.push(nms(&dets, nms_iou));
        }
        Ok(all)
    }

    pub fn classify<T: Real>(&self, store: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<ClassifierOutput>> {
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.graph.input(images.clone());
        let taps = self.backbone.forward(&mut ctx, x)?;
        self.classifier.classify(&mut ctx, taps.small)
    }
}

/// Single-scale network on an 8×8 input: one dense layer, SPP and one head.
#[derive(Debug, Clone)]
pub struct MicroNet {
    pub layer: DenseLayer,
    pub head: HeadBranch,
    pub geom: Geometry,
}

pub const MICRO_INPUT: usize = 8;

impl MicroNet {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, growth: usize, head_width: usize) -> Self {
        let layer = DenseLayer::new(store, rng, "micro.layer", 3, growth);
        let head = HeadBranch::new(store, rng, "micro.head", 4 * (3 + growth), head_width);
        let geom = Geometry {
            input_size: MICRO_INPUT,
            scales: vec![ScaleGeom {
                grid: MICRO_INPUT,
                anchors: vec![(1.5, 2.0), (3.0, 2.5), (4.0, 5.0)],
            }],
        };
        Self { layer, head, geom }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let s = ctx.graph.shape(image);
        if s.c != 3 || s.h != MICRO_INPUT || s.w != MICRO_INPUT {
            return Err(Error::ShapeMismatch {
                op: "micro_net",
                lhs: s,
                rhs: Shape::new(s.n, 3, MICRO_INPUT, MICRO_INPUT),
            });
        }
        let h = self.layer.forward(ctx, image)?;
        let h = spp(ctx, h)?;
        Ok(self.head.forward(ctx, h)?.1)
    }
}
