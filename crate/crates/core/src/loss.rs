//! Detection objective: box regression (squared error or CIoU), objectness
//! and per-class binary cross-entropy.
//!
//! Gradients with respect to the raw head outputs are derived analytically
//! and recorded on the tape as a single scalar node, see [`detection_loss`].

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::boxes::{iou, shape_iou, BBox, NUM_CLASSES};
use crate::classifier::PROB_EPS;
use crate::detector::{channel, decode_box, BoxLogits, Geometry, ScaleGeom, TW_CLAMP};
use crate::error::{invalid, Error, Result};
use crate::nn::Ctx;
use crate::scalar::{sigmoid, Real};
use crate::tensor::Tensor;

pub const DEFAULT_IGNORE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxMode {
    /// Squared error on decoded (x, y, w, h).
    Mse,
    Ciou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_coord: 5.0,
            lambda_noobj: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_coord > 0.0 && self.lambda_noobj > 0.0) {
            return Err(invalid("loss", "lambda_coord and lambda_noobj must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub box_loss: T,
    pub obj: T,
    pub cls: T,
}

impl<T: Real> LossBreakdown<T> {
    pub fn total(&self) -> T {
        self.box_loss + self.obj + self.cls
    }

    /// `step total box obj cls`, six decimals.
    pub fn log_line(&self, step: usize) -> String {
        format!(
            "{} {:.6} {:.6} {:.6} {:.6}",
            step,
            self.total().to_f64_lossy(),
            self.box_loss.to_f64_lossy(),
            self.obj.to_f64_lossy(),
            self.cls.to_f64_lossy()
        )
    }
}

/// Intermediate quantities of the CIoU loss between a prediction and a ground truth.
#[derive(Debug, Clone, Copy)]
pub struct CiouTerms<T> {
    pub iou: T,
    pub center_dist2: T,
    pub diag2: T,
    pub v: T,
    pub alpha: T,
    pub loss: T,
}

pub fn ciou_terms<T: Real>(pred: &BBox<T>, gt: &BBox<T>) -> CiouTerms<T> {
    let i = iou(pred, gt);
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let diag2 = cw * cw + ch * ch;
    let dx = pred.cx - gt.cx;
    let dy = pred.cy - gt.cy;
    let center_dist2 = dx * dx + dy * dy;
    let k = T::lit(4.0 / (PI * PI));
    let dtheta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
    let v = k * dtheta * dtheta;
    let denom = (T::one() - i) + v;
    let alpha = if denom > T::zero() { v / denom } else { T::zero() };
    let loss = if diag2 > T::zero() {
        T::one() - i + center_dist2 / diag2 + alpha * v
    } else {
        // both boxes collapsed onto one point
        T::one() - i
    };
    CiouTerms {
        iou: i,
        center_dist2,
        diag2,
        v,
        alpha,
        loss,
    }
}

/// `1 − IoU + ρ²/c² + α·v`.
pub fn ciou_loss<T: Real>(pred: &BBox<T>, gt: &BBox<T>) -> T {
    ciou_terms(pred, gt).loss
}

/// How the trade-off weight `α` enters the CIoU gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlphaGrad {
    /// `α` is a constant in the backward pass.
    Detached,
    /// Exact derivative of the loss, `α` included.
    Full,
}

/// CIoU loss and its gradient with respect to the prediction's `(cx, cy, w, h)`.
pub fn ciou_loss_grad<T: Real>(pred: &BBox<T>, gt: &BBox<T>, mode: AlphaGrad) -> (T, [T; 4]) {
    let t = ciou_terms(pred, gt);
    ciou_grad_with_alpha(pred, gt, t, t.alpha, mode)
}

/// CIoU with `α` fixed to a given value.
pub fn ciou_loss_fixed_alpha<T: Real>(pred: &BBox<T>, gt: &BBox<T>, alpha: T) -> T {
    let t = ciou_terms(pred, gt);
    if t.diag2 > T::zero() {
        T::one() - t.iou + t.center_dist2 / t.diag2 + alpha * t.v
    } else {
        T::one() - t.iou
    }
}

fn ciou_grad_with_alpha<T: Real>(pred: &BBox<T>, gt: &BBox<T>, t: CiouTerms<T>, alpha: T, mode: AlphaGrad) -> (T, [T; 4]) {
    let zero = T::zero();
    let one = T::one();
    let half = T::lit(0.5);
    let (px1, py1, px2, py2) = pred.corners();
    let (gx1, gy1, gx2, gy2) = gt.corners();

    // intersection
    let iw = px2.min(gx2) - px1.max(gx1);
    let ih = py2.min(gy2) - py1.max(gy1);
    let mut d_inter = [zero; 4];
    if iw > zero && ih > zero {
        let a2 = if px2 < gx2 { one } else { zero };
        let a1 = if px1 > gx1 { -one } else { zero };
        let b2 = if py2 < gy2 { one } else { zero };
        let b1 = if py1 > gy1 { -one } else { zero };
        d_inter = [ih * (a2 + a1), iw * (b2 + b1), ih * (a2 - a1) * half, iw * (b2 - b1) * half];
    }
    let inter = iw.max(zero) * ih.max(zero);
    let union = pred.area() + gt.area() - inter;
    let d_area = [zero, zero, pred.h, pred.w];
    let mut d_iou = [zero; 4];
    if union > zero {
        for k in 0..4 {
            let du = d_area[k] - d_inter[k];
            d_iou[k] = (d_inter[k] * union - inter * du) / (union * union);
        }
    }

    let two = T::lit(2.0);
    // d(αv) = α·dv + v·dα, and with α = v/(1 − IoU + v) that is α(2−α)·dv + α²·dIoU
    let (iou_coef, v_coef) = match mode {
        AlphaGrad::Detached => (-one, alpha),
        AlphaGrad::Full => (alpha * alpha - one, alpha * (two - alpha)),
    };
    let mut grad = [zero; 4];

    if t.diag2 > zero {
        for k in 0..4 {
            grad[k] = iou_coef * d_iou[k];
        }
        let cw = px2.max(gx2) - px1.min(gx1);
        let ch = py2.max(gy2) - py1.min(gy1);
        let e2 = if px2 >= gx2 { one } else { zero };
        let e1 = if px1 <= gx1 { -one } else { zero };
        let f2 = if py2 >= gy2 { one } else { zero };
        let f1 = if py1 <= gy1 { -one } else { zero };
        let d_diag = [
            two * cw * (e2 + e1),
            two * ch * (f2 + f1),
            two * cw * (e2 - e1) * half,
            two * ch * (f2 - f1) * half,
        ];
        let d_rho = [two * (pred.cx - gt.cx), two * (pred.cy - gt.cy), zero, zero];
        let c4 = t.diag2 * t.diag2;
        for k in 0..4 {
            grad[k] += (d_rho[k] * t.diag2 - t.center_dist2 * d_diag[k]) / c4;
        }

        let kk = T::lit(4.0 / (PI * PI));
        let dtheta = (gt.w / gt.h).atan() - (pred.w / pred.h).atan();
        let r2 = pred.w * pred.w + pred.h * pred.h;
        let dv_dw = -two * kk * dtheta * (pred.h / r2);
        let dv_dh = -two * kk * dtheta * (-pred.w / r2);
        grad[2] += v_coef * dv_dw;
        grad[3] += v_coef * dv_dh;
    } else {
        grad = d_iou.map(|g| -g);
    }
    let loss = if t.diag2 > zero {
        one - t.iou + t.center_dist2 / t.diag2 + alpha * t.v
    } else {
        one - t.iou
    };
    (loss, grad)
}

/// Slot in the union of all scale grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Slot {
    pub scale: usize,
    pub row: usize,
    pub col: usize,
    pub anchor: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    NoObj,
    /// Responsible for the ground truth at this index.
    Obj(usize),
    /// Overlaps some ground truth above the ignore threshold; contributes nothing.
    Ignore,
}

/// Responsibility map of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment<T> {
    pub gts: Vec<BBox<T>>,
    /// Per scale, indexed by `(row·K + col)·M + anchor`.
    states: Vec<Vec<SlotState>>,
    grids: Vec<(usize, usize)>,
    /// Ground-truth indices that found no free slot.
    pub unassigned: Vec<usize>,
}

impl<T: Real> Assignment<T> {
    fn index(&self, slot: Slot) -> usize {
        let (k, m) = self.grids[slot.scale];
        (slot.row * k + slot.col) * m + slot.anchor
    }

    pub fn state(&self, slot: Slot) -> SlotState {
        self.states[slot.scale][self.index(slot)]
    }

    pub fn slots(&self) -> impl Iterator<Item = (Slot, SlotState)> + '_ {
        self.grids.iter().enumerate().flat_map(move |(scale, &(k, m))| {
            (0..k * k * m).map(move |i| {
                let slot = Slot {
                    scale,
                    row: i / m / k,
                    col: (i / m) % k,
                    anchor: i % m,
                };
                (slot, self.states[scale][i])
            })
        })
    }

    pub fn obj_slots(&self) -> Vec<(Slot, usize)> {
        self.slots()
            .filter_map(|(s, st)| match st {
                SlotState::Obj(g) => Some((s, g)),
                _ => None,
            })
            .collect()
    }

    pub fn noobj_count(&self) -> usize {
        self.slots().filter(|(_, s)| *s == SlotState::NoObj).count()
    }
}

pub fn validate_gt<T: Real>(b: &BBox<T>) -> Result<()> {
    let in_unit = |v: T| v >= T::zero() && v < T::one();
    if !(b.is_finite() && in_unit(b.cx) && in_unit(b.cy) && b.w > T::zero() && b.h > T::zero()) {
        return Err(invalid(
            "assign_targets",
            format!("ground truth {:?} must have its center in [0,1) and positive size", b),
        ));
    }
    if b.class_id >= NUM_CLASSES {
        return Err(invalid("assign_targets", format!("class id {} out of range", b.class_id)));
    }
    Ok(())
}

fn cell_of<T: Real>(v: T, grid: usize) -> usize {
    let c = (v * T::from_usize_lossy(grid)).floor().to_f64_lossy();
    (c.max(0.0) as usize).min(grid - 1)
}

/// Each ground truth goes to the cell containing its center on the scale of
/// its best shape-matching anchor. If that slot is taken the next-best anchor
/// is tried. Non-responsible slots whose anchor box (centered in its cell)
/// overlaps a ground truth above `ignore_threshold` are ignored.
pub fn assign_targets<T: Real>(gts: &[BBox<T>], geom: &Geometry, ignore_threshold: f64) -> Result<Assignment<T>> {
    for g in gts {
        validate_gt(g)?;
    }
    let s = T::from_usize_lossy(geom.input_size);
    let grids: Vec<(usize, usize)> = geom.scales.iter().map(|sc| (sc.grid, sc.anchors.len())).collect();
    let mut states: Vec<Vec<SlotState>> = grids.iter().map(|&(k, m)| vec![SlotState::NoObj; k * k * m]).collect();
    let mut unassigned = Vec::new();

    for (gi, g) in gts.iter().enumerate() {
        let mut cands: Vec<(T, usize, usize)> = Vec::new();
        for (si, sc) in geom.scales.iter().enumerate() {
            for (ai, &(aw, ah)) in sc.anchors.iter().enumerate() {
                cands.push((shape_iou(g.w * s, g.h * s, T::lit(aw), T::lit(ah)), si, ai));
            }
        }
        // stable: ties keep the smaller (scale, anchor)
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
        let mut placed = false;
        for (_, si, ai) in cands {
            let (k, m) = grids[si];
            let (row, col) = (cell_of(g.cy, k), cell_of(g.cx, k));
            let idx = (row * k + col) * m + ai;
            if states[si][idx] == SlotState::NoObj {
                states[si][idx] = SlotState::Obj(gi);
                placed = true;
                break;
            }
        }
        if !placed {
            unassigned.push(gi);
        }
    }

    let thr = T::lit(ignore_threshold);
    if !gts.is_empty() {
        for (si, sc) in geom.scales.iter().enumerate() {
            let k = sc.grid;
            let kf = T::from_usize_lossy(k);
            let m = sc.anchors.len();
            for row in 0..k {
                for col in 0..k {
                    for (ai, &(aw, ah)) in sc.anchors.iter().enumerate() {
                        let idx = (row * k + col) * m + ai;
                        if states[si][idx] != SlotState::NoObj {
                            continue;
                        }
                        let prior = BBox::new(
                            (T::from_usize_lossy(col) + T::lit(0.5)) / kf,
                            (T::from_usize_lossy(row) + T::lit(0.5)) / kf,
                            T::lit(aw) / s,
                            T::lit(ah) / s,
                            0,
                        );
                        if gts.iter().any(|g| iou(&prior, g) > thr) {
                            states[si][idx] = SlotState::Ignore;
                        }
                    }
                }
            }
        }
    }

    Ok(Assignment {
        gts: gts.to_vec(),
        states,
        grids,
        unassigned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub box_mode: BoxMode,
    pub alpha_grad: AlphaGrad,
    pub ignore_threshold: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            box_mode: BoxMode::Ciou,
            alpha_grad: AlphaGrad::Detached,
            ignore_threshold: DEFAULT_IGNORE_THRESHOLD,
        }
    }
}

/// `−log(clamp(p))` for target 1 or `−log(1 − clamp(p))` for target 0, and
/// its derivative with respect to the logit producing `p`.
fn bce_logit<T: Real>(logit: T, target: bool) -> (T, T) {
    let p = sigmoid(logit);
    let eps = T::lit(PROB_EPS);
    let pc = p.max(eps).min(T::one() - eps);
    let clamped = p < eps || p > T::one() - eps;
    if target {
        (-pc.ln(), if clamped { T::zero() } else { p - T::one() })
    } else {
        (-(T::one() - pc).ln(), if clamped { T::zero() } else { p })
    }
}

/// Loss values and gradients with respect to every raw output tensor.
pub struct LossEval<T> {
    pub breakdown: LossBreakdown<T>,
    pub grads: Vec<Vec<T>>,
}

/// Sums per-slot terms over each image and averages over the batch.
pub fn total_loss<T: Real>(
    raws: &[&Tensor<T>],
    assignments: &[Assignment<T>],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossEval<T>> {
    loss_impl(raws, None, assignments, geom, cfg)
}

/// [`total_loss`] with every CIoU `α` taken from the predictions in
/// `alpha_raws` instead of `raws`. Its gradient at `raws == alpha_raws` is the
/// detached-`α` gradient.
pub fn total_loss_frozen_alpha<T: Real>(
    raws: &[&Tensor<T>],
    alpha_raws: &[&Tensor<T>],
    assignments: &[Assignment<T>],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossEval<T>> {
    loss_impl(raws, Some(alpha_raws), assignments, geom, cfg)
}

fn read_logits<T: Real>(raw: &Tensor<T>, b: usize, slot: Slot) -> BoxLogits<T> {
    let s = raw.shape();
    let at = |f: usize| raw.data()[s.index(b, channel(slot.anchor, f), slot.row, slot.col)];
    BoxLogits {
        tx: at(0),
        ty: at(1),
        tw: at(2),
        th: at(3),
    }
}

fn loss_impl<T: Real>(
    raws: &[&Tensor<T>],
    alpha_raws: Option<&[&Tensor<T>]>,
    assignments: &[Assignment<T>],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<LossEval<T>> {
    if let Some(a) = alpha_raws {
        if a.len() != raws.len() || a.iter().zip(raws).any(|(x, y)| x.shape() != y.shape()) {
            return Err(invalid("total_loss", "alpha reference must match the raw outputs"));
        }
    }
    if raws.len() != geom.scales.len() {
        return Err(invalid(
            "total_loss",
            format!("{} raw tensors for {} scales", raws.len(), geom.scales.len()),
        ));
    }
    let batch = raws.first().map(|r| r.shape().n).unwrap_or(0);
    if assignments.len() != batch || batch == 0 {
        return Err(invalid(
            "total_loss",
            format!("{} assignments for a batch of {}", assignments.len(), batch),
        ));
    }
    for (r, sc) in raws.iter().zip(&geom.scales) {
        let s = r.shape();
        if s.n != batch || s.c != sc.anchors.len() * crate::detector::FIELDS || s.h != sc.grid || s.w != sc.grid {
            return Err(invalid("total_loss", format!("raw {} does not match grid {}", s, sc.grid)));
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(batch);
    let lc = T::lit(cfg.weights.lambda_coord);
    let ln = T::lit(cfg.weights.lambda_noobj);
    let two = T::lit(2.0);
    let lim = T::lit(TW_CLAMP);

    let mut box_loss = T::zero();
    let mut obj = T::zero();
    let mut cls = T::zero();
    let mut grads: Vec<Vec<T>> = raws.iter().map(|r| vec![T::zero(); r.numel()]).collect();

    for (b, asg) in assignments.iter().enumerate() {
        for (slot, state) in asg.slots() {
            let sc: &ScaleGeom = &geom.scales[slot.scale];
            let raw = raws[slot.scale];
            let shape = raw.shape();
            let at = |f: usize| shape.index(b, channel(slot.anchor, f), slot.row, slot.col);
            let g = &mut grads[slot.scale];
            match state {
                SlotState::Ignore => {}
                SlotState::NoObj => {
                    let (l, d) = bce_logit(raw.data()[at(4)], false);
                    obj += ln * l * inv_n;
                    g[at(4)] += ln * d * inv_n;
                }
                SlotState::Obj(gi) => {
                    let gt = &asg.gts[gi];
                    let (l, d) = bce_logit(raw.data()[at(4)], true);
                    obj += l * inv_n;
                    g[at(4)] += d * inv_n;

                    for c in 0..NUM_CLASSES {
                        let (l, d) = bce_logit(raw.data()[at(5 + c)], c == gt.class_id);
                        cls += l * inv_n;
                        g[at(5 + c)] += d * inv_n;
                    }

                    let t = read_logits(raw, b, slot);
                    let anchor = sc.anchors[slot.anchor];
                    let pred = decode_box(t, slot.row, slot.col, sc.grid, anchor, geom.input_size);
                    let scale = lc * (two - gt.w * gt.h);
                    let (l, d_box) = match cfg.box_mode {
                        BoxMode::Ciou => match alpha_raws {
                            None => ciou_loss_grad(&pred, gt, cfg.alpha_grad),
                            Some(refs) => {
                                let rt = read_logits(refs[slot.scale], b, slot);
                                let rp = decode_box(rt, slot.row, slot.col, sc.grid, anchor, geom.input_size);
                                let alpha = ciou_terms(&rp, gt).alpha;
                                let terms = ciou_terms(&pred, gt);
                                ciou_grad_with_alpha(&pred, gt, terms, alpha, AlphaGrad::Detached)
                            }
                        },
                        BoxMode::Mse => {
                            let e = [pred.cx - gt.cx, pred.cy - gt.cy, pred.w - gt.w, pred.h - gt.h];
                            (e.iter().map(|&x| x * x).sum(), e.map(|x| two * x))
                        }
                    };
                    box_loss += scale * l * inv_n;
                    let k = T::from_usize_lossy(sc.grid);
                    let sx = sigmoid(t.tx);
                    let sy = sigmoid(t.ty);
                    let dw = if t.tw.abs() < lim { pred.w } else { T::zero() };
                    let dh = if t.th.abs() < lim { pred.h } else { T::zero() };
                    let chain = [sx * (T::one() - sx) / k, sy * (T::one() - sy) / k, dw, dh];
                    for f in 0..4 {
                        g[at(f)] += scale * d_box[f] * chain[f] * inv_n;
                    }
                }
            }
        }
    }

    let breakdown = LossBreakdown { box_loss, obj, cls };
    for (name, v) in [("box", box_loss), ("obj", obj), ("cls", cls)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name });
        }
    }
    Ok(LossEval { breakdown, grads })
}

/// Evaluates [`total_loss`] on graph nodes and records it as a differentiable scalar.
pub fn detection_loss<T: Real>(
    ctx: &mut Ctx<'_, T>,
    raws: &[Var],
    assignments: &[Assignment<T>],
    geom: &Geometry,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown<T>)> {
    let eval = {
        let tensors: Vec<&Tensor<T>> = raws.iter().map(|&v| ctx.graph.value(v)).collect();
        total_loss(&tensors, assignments, geom, cfg)?
    };
    let v = ctx
        .graph
        .scalar(eval.breakdown.total(), raws.to_vec(), eval.grads)?;
    Ok((v, eval.breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::AnchorSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn corners(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::from_corners(x1, y1, x2, y2, 0)
    }

    #[test]
    fn ciou_hand_cases() {
        let a = corners(0.0, 0.0, 2.0, 2.0);
        assert!(ciou_loss(&a, &a).abs() < 1e-15);
        let b = corners(1.0, 1.0, 3.0, 3.0);
        let l = ciou_loss(&a, &b);
        assert!((l - 61.0 / 63.0).abs() < 1e-15, "{l}");
        // same aspect ratio: no v term
        let c = corners(0.5, 0.0, 1.5, 1.0);
        let t = ciou_terms(&c, &a);
        assert_eq!(t.v, 0.0);
        assert!((t.loss - (1.0 - t.iou + t.center_dist2 / t.diag2)).abs() < 1e-15);
    }

    #[test]
    fn ciou_degenerate_point_boxes() {
        let p = BBox::new(0.5, 0.5, 0.0, 0.0, 0);
        let t = ciou_terms(&p, &p);
        assert_eq!(t.diag2, 0.0);
        assert_eq!(t.loss, 1.0);
    }

    #[test]
    fn ciou_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut checked = 0;
        while checked < 300 {
            let p = BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), 0);
            let g = BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.05..0.5), rng.random_range(0.05..0.5), 0);
            let (_, grad) = ciou_loss_grad(&p, &g, AlphaGrad::Detached);
            let (_, full) = ciou_loss_grad(&p, &g, AlphaGrad::Full);
            let alpha = ciou_terms(&p, &g).alpha;
            let h = 1e-7;
            let f = |q: &BBox<f64>| {
                // α frozen at its value at p
                let t = ciou_terms(q, &g);
                1.0 - t.iou + t.center_dist2 / t.diag2 + alpha * t.v
            };
            let mut ok = true;
            let mut fd = [0.0; 4];
            let mut fd_full = [0.0; 4];
            for k in 0..4 {
                let mut a = p;
                let mut b = p;
                match k {
                    0 => (a.cx += h, b.cx -= h),
                    1 => (a.cy += h, b.cy -= h),
                    2 => (a.w += h, b.w -= h),
                    _ => (a.h += h, b.h -= h),
                };
                fd[k] = (f(&a) - f(&b)) / (2.0 * h);
                fd_full[k] = (ciou_loss(&a, &g) - ciou_loss(&b, &g)) / (2.0 * h);
                // skip pairs sitting on an edge-crossing kink
                let fwd = (f(&a) - f(&p)) / h;
                let bwd = (f(&p) - f(&b)) / h;
                ok &= (fwd - bwd).abs() < 1e-4;
            }
            if !ok {
                continue;
            }
            for k in 0..4 {
                assert!((fd[k] - grad[k]).abs() < 1e-6, "{k}: {} vs {}", fd[k], grad[k]);
                assert!((fd_full[k] - full[k]).abs() < 1e-6, "{k}: {} vs {}", fd_full[k], full[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn assignment_single_gt_matches_anchor() {
        let anchors = AnchorSet::fallback(416);
        let geom = Geometry::three_scale(416, &anchors);
        // anchor 5 is (59,119) -> scale 1 (grid 26), local index 2
        let (aw, ah) = anchors.all()[5];
        let gt = BBox::new((4.0 + 0.5) / 26.0, (3.0 + 0.5) / 26.0, aw / 416.0, ah / 416.0, 1);
        let a = assign_targets(&[gt], &geom, DEFAULT_IGNORE_THRESHOLD).unwrap();
        let obj = a.obj_slots();
        assert_eq!(obj.len(), 1);
        assert_eq!(
            obj[0].0,
            Slot {
                scale: 1,
                row: 3,
                col: 4,
                anchor: 2
            }
        );
    }

    #[test]
    fn assignment_empty_is_all_noobj() {
        let geom = Geometry::three_scale(64, &AnchorSet::fallback(64));
        let a = assign_targets::<f64>(&[], &geom, 0.5).unwrap();
        assert!(a.obj_slots().is_empty());
        assert_eq!(a.noobj_count(), geom.slot_count());
    }

    #[test]
    fn assignment_rejects_center_outside_unit() {
        let geom = Geometry::three_scale(64, &AnchorSet::fallback(64));
        assert!(assign_targets(&[BBox::new(1.0, 0.5, 0.1, 0.1, 0)], &geom, 0.5).is_err());
        assert!(assign_targets(&[BBox::new(0.5, 0.5, 0.0, 0.1, 0)], &geom, 0.5).is_err());
    }

    #[test]
    fn assignment_resolves_collisions() {
        let geom = Geometry::three_scale(64, &AnchorSet::fallback(64));
        let g = BBox::new(0.3, 0.3, 0.2, 0.2, 0);
        let a = assign_targets(&[g, g], &geom, 0.5).unwrap();
        let obj = a.obj_slots();
        assert_eq!(obj.len(), 2);
        assert_ne!(obj[0].0, obj[1].0);
    }

    #[test]
    fn bce_clamps() {
        let (l, d) = bce_logit(40.0f64, true);
        assert!(l < 1.1e-7 && d == 0.0);
        let (l, _) = bce_logit(0.0f64, false);
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
