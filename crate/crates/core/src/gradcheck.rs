//! Finite-difference verification of the analytic gradients on the micro network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::error::Result;
use crate::loss::{assign_targets, detection_loss, total_loss, total_loss_frozen_alpha, AlphaGrad, BoxMode, LossConfig};
use crate::model::{MicroNet, MICRO_INPUT};
use crate::nn::{Ctx, Mode};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub box_mode: BoxMode,
    pub alpha_grad: AlphaGrad,
    pub step: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn micro_targets() -> Vec<BBox<f64>> {
    vec![
        BBox::new(0.30, 0.40, 0.25, 0.30, 0),
        BBox::new(0.70, 0.65, 0.50, 0.55, 1),
    ]
}

/// Compares the tape's parameter gradients of the detection loss against
/// central differences for every trainable element.
///
/// With [`AlphaGrad::Detached`] the differenced function keeps each CIoU `α`
/// at its unperturbed value, which is the function the detached gradient
/// differentiates.
pub fn gradcheck_micro(box_mode: BoxMode, alpha_grad: AlphaGrad, step: f64, seed: u64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let net = MicroNet::new(&mut store, &mut rng, 8, 16);
    let image = Tensor::uniform(Shape::new(1, 3, MICRO_INPUT, MICRO_INPUT), 0.0, 1.0, &mut rng);
    let cfg = LossConfig {
        box_mode,
        alpha_grad,
        ..LossConfig::default()
    };
    let assignment = [assign_targets(&micro_targets(), &net.geom, cfg.ignore_threshold)?];

    let (analytic, reference) = {
        let mut ctx = Ctx::new(&store, Mode::Train);
        let x = ctx.graph.input(image.clone());
        let raw = net.forward(&mut ctx, x)?;
        let (loss, _) = detection_loss(&mut ctx, &[raw], &assignment, &net.geom, &cfg)?;
        let grads = ctx.graph.backward(loss)?;
        (grads.param_grads(), ctx.graph.value(raw).clone())
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store, Mode::Train);
        let x = ctx.graph.input(image.clone());
        let raw = net.forward(&mut ctx, x)?;
        let raws = [ctx.graph.value(raw)];
        let eval = match (box_mode, alpha_grad) {
            (BoxMode::Ciou, AlphaGrad::Detached) => {
                total_loss_frozen_alpha(&raws, &[&reference], &assignment, &net.geom, &cfg)?
            }
            _ => total_loss(&raws, &assignment, &net.geom, &cfg)?,
        };
        Ok(eval.breakdown.total())
    };

    let mut report = GradcheckReport {
        box_mode,
        alpha_grad,
        step,
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        analytic: 0.0,
        numeric: 0.0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let grad = analytic
            .iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&store)?;
            store.get_mut(id).data_mut()[i] = orig;
            let n = (up - down) / (2.0 * step);
            let e = rel_err(a, n);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = e;
                report.worst = format!("{}[{}]", store.name(id), i);
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    Ok(report)
}
