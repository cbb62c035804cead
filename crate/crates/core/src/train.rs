//! SGD with momentum over a set of annotated samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::anchors::anchors_from_boxes;
use crate::augment::{hflip, mosaic, photometric, resize_sample, MosaicConfig, Sample};
use crate::boxes::BBox;
use crate::classifier::batch_classifier_loss;
use crate::config::{AnchorSource, RunConfig, Task};
use crate::detector::AnchorSet;
use crate::error::{invalid, Result};
use crate::loss::{assign_targets, detection_loss, LossBreakdown};
use crate::model::Network;
use crate::nn::{apply_bn_updates, Ctx, Mode};
use crate::params::{ParamKind, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Fire/Normal label of a sample: fire when any fire box is present.
pub fn fire_label(s: &Sample) -> bool {
    s.boxes.iter().any(|b| b.class_id == 0)
}

/// Chooses the anchor priors named by the config.
pub fn select_anchors(cfg: &RunConfig, samples: &[Sample]) -> Result<AnchorSet> {
    let size = cfg.model_config().backbone.input_size;
    match cfg.anchors.source {
        AnchorSource::Fallback => Ok(AnchorSet::fallback(size)),
        AnchorSource::Explicit => cfg.anchors.explicit(),
        AnchorSource::Kmeans => {
            let shapes: Vec<(f64, f64)> = samples
                .iter()
                .flat_map(|s| s.boxes.iter().map(|b| (b.w, b.h)))
                .filter(|&(w, h)| w > 0.0 && h > 0.0)
                .collect();
            if shapes.is_empty() {
                Ok(AnchorSet::fallback(size))
            } else {
                anchors_from_boxes(&shapes, size, cfg.seed)
            }
        }
    }
}

/// Boxes usable as targets: positive size, centers pulled inside `[0, 1)`.
fn target_boxes(boxes: &[BBox<f64>]) -> Vec<BBox<f64>> {
    let top = 1.0 - 1e-9;
    boxes
        .iter()
        .filter(|b| b.w > 0.0 && b.h > 0.0 && b.is_finite())
        .map(|b| BBox {
            cx: b.cx.clamp(0.0, top),
            cy: b.cy.clamp(0.0, top),
            ..*b
        })
        .collect()
}

pub struct Trainer<T: Real> {
    pub cfg: RunConfig,
    pub store: ParamStore<T>,
    pub net: Network,
    velocity: Vec<Vec<T>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub step: usize,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: RunConfig, anchors: &AnchorSet) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let net = Network::new(&mut store, cfg.model_config(), anchors, cfg.seed)?;
        let velocity = store.iter().map(|(_, p)| vec![T::zero(); p.tensor.numel()]).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
        Ok(Self {
            cfg,
            store,
            net,
            velocity,
            rng,
            order: Vec::new(),
            cursor: 0,
            step: 0,
        })
    }

    fn next_index(&mut self, n: usize) -> usize {
        if self.cursor >= self.order.len() {
            self.order = (0..n).collect();
            if self.cfg.train.batch_size < n {
                self.order.shuffle(&mut self.rng);
            }
            self.cursor = 0;
        }
        self.cursor += 1;
        self.order[self.cursor - 1]
    }

    fn augmented(&mut self, samples: &[Sample], idx: usize) -> Result<Sample> {
        let t = self.cfg.train;
        let size = self.net.input_size();
        if t.mosaic_prob > 0.0 && self.rng.random::<f64>() < t.mosaic_prob {
            let mut picks = vec![samples[idx].clone()];
            for _ in 0..3 {
                picks.push(samples[self.rng.random_range(0..samples.len())].clone());
            }
            let mut mc = MosaicConfig::new(size);
            mc.flip_prob = t.flip_prob;
            mc.jitter = t.jitter;
            return mosaic(&picks, &mc, &mut self.rng);
        }
        let mut s = resize_sample(&samples[idx], size);
        if t.flip_prob > 0.0 && self.rng.random::<f64>() < t.flip_prob {
            s = hflip(&s);
        }
        let j = t.jitter;
        if j.hue > 0.0 || j.saturation > 1.0 || j.brightness > 0.0 {
            let b = if j.brightness > 0.0 { self.rng.random_range(-j.brightness..=j.brightness) } else { 0.0 };
            let ls = j.saturation.ln();
            let sat = if ls > 0.0 { self.rng.random_range(-ls..=ls).exp() } else { 1.0 };
            let hue = if j.hue > 0.0 { self.rng.random_range(-j.hue..=j.hue) } else { 0.0 };
            s = photometric(&s, b, sat, hue);
        }
        Ok(s)
    }

    /// Forward, loss, backward and one SGD update on an explicit batch.
    pub fn step_on(&mut self, batch: &[Sample]) -> Result<LossBreakdown<T>> {
        let images: Vec<Tensor<T>> = batch.iter().map(|s| s.image.cast()).collect();
        let images = Tensor::stack(&images)?;
        let (breakdown, grads, updates) = {
            let mut ctx = Ctx::new(&self.store, Mode::Train);
            let x = ctx.graph.input(images);
            let (loss, breakdown) = match self.cfg.train.task {
                Task::Detect => {
                    let out = self.net.forward(&mut ctx, x)?;
                    let geom = self.net.geometry(&self.store)?;
                    let asgs = batch
                        .iter()
                        .map(|s| {
                            let gts: Vec<BBox<T>> = target_boxes(&s.boxes).iter().map(BBox::cast).collect();
                            assign_targets(&gts, &geom, self.cfg.loss.ignore_threshold)
                        })
                        .collect::<Result<Vec<_>>>()?;
                    detection_loss(&mut ctx, &out.raws, &asgs, &geom, &self.cfg.loss_config())?
                }
                Task::Classify => {
                    let taps = self.net.backbone.forward(&mut ctx, x)?;
                    let probs = self.net.classifier.forward(&mut ctx, taps.small)?;
                    let labels: Vec<bool> = batch.iter().map(fire_label).collect();
                    let loss = batch_classifier_loss(&mut ctx, probs, &labels)?;
                    let v = ctx.graph.value(loss).data()[0];
                    (
                        loss,
                        LossBreakdown {
                            box_loss: T::zero(),
                            obj: T::zero(),
                            cls: v,
                        },
                    )
                }
            };
            let (graph, updates) = ctx.into_parts();
            let grads = graph.backward(loss)?.param_grads();
            (breakdown, grads, updates)
        };
        let lr = T::lit(self.cfg.train.learning_rate);
        let mu = T::lit(self.cfg.train.momentum);
        for (id, g) in grads {
            if self.store.kind(id) != ParamKind::Trainable {
                continue;
            }
            let v = &mut self.velocity[id.index()];
            let p = self.store.get_mut(id).data_mut();
            for ((pi, vi), &gi) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
                *vi = mu * *vi + gi;
                *pi -= lr * *vi;
            }
        }
        apply_bn_updates(&mut self.store, &updates);
        self.step += 1;
        Ok(breakdown)
    }

    /// Draws the next augmented batch and takes one step.
    pub fn step(&mut self, samples: &[Sample]) -> Result<LossBreakdown<T>> {
        if samples.is_empty() {
            return Err(invalid("train", "no training samples"));
        }
        let bs = self.cfg.train.batch_size;
        let mut batch = Vec::with_capacity(bs);
        for _ in 0..bs {
            let i = self.next_index(samples.len());
            batch.push(self.augmented(samples, i)?);
        }
        self.step_on(&batch)
    }

    /// Replaces BN running statistics by the statistics of the un-augmented
    /// training set evaluated as one batch.
    pub fn recalibrate_bn(&mut self, samples: &[Sample]) -> Result<()> {
        let size = self.net.input_size();
        let images: Vec<Tensor<T>> = samples.iter().map(|s| resize_sample(s, size).image.cast()).collect();
        let images = Tensor::stack(&images)?;
        let updates = {
            let mut ctx = Ctx::new(&self.store, Mode::Train);
            let x = ctx.graph.input(images);
            match self.cfg.train.task {
                Task::Detect => {
                    self.net.forward(&mut ctx, x)?;
                }
                Task::Classify => {
                    let taps = self.net.backbone.forward(&mut ctx, x)?;
                    self.net.classifier.forward(&mut ctx, taps.small)?;
                }
            }
            ctx.into_parts().1
        };
        for u in &updates {
            self.store.get_mut(u.mean).data_mut().copy_from_slice(&u.batch_mean);
            self.store.get_mut(u.var).data_mut().copy_from_slice(&u.batch_var);
        }
        Ok(())
    }

    /// Runs `cfg.train.steps` steps, calling `on_step` after each one.
    pub fn run(&mut self, samples: &[Sample], mut on_step: impl FnMut(usize, &LossBreakdown<T>)) -> Result<Vec<LossBreakdown<T>>> {
        if samples.is_empty() {
            return Err(invalid("train", "the training manifest is empty"));
        }
        let mut curve = Vec::with_capacity(self.cfg.train.steps);
        for _ in 0..self.cfg.train.steps {
            let b = self.step(samples)?;
            on_step(self.step, &b);
            curve.push(b);
        }
        if self.cfg.train.bn_recalibrate {
            self.recalibrate_bn(samples)?;
        }
        Ok(curve)
    }
}

/// Builds a trainer with anchors chosen from `samples` and trains it.
pub fn train<T: Real>(
    cfg: &RunConfig,
    samples: &[Sample],
    on_step: impl FnMut(usize, &LossBreakdown<T>),
) -> Result<(Trainer<T>, Vec<LossBreakdown<T>>)> {
    if samples.is_empty() {
        return Err(invalid("train", "the training manifest is empty"));
    }
    let anchors = select_anchors(cfg, samples)?;
    let mut t = Trainer::new(cfg.clone(), &anchors)?;
    let curve = t.run(samples, on_step)?;
    Ok((t, curve))
}
