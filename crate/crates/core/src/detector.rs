//! Multi-scale detection: SPP, the three heads, box decoding and NMS.
//!
//! Scales are ordered coarse to fine: scale 0 is the stride-32 grid fed by
//! the deepest tap (through SPP) and owns the three largest anchors, scale 2
//! is the stride-8 grid and owns the three smallest.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;

use crate::autodiff::Var;
use crate::backbone::FeatureTaps;
use crate::boxes::{iou, BBox, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::nn::{Conv, ConvBnAct, Ctx};
use crate::params::ParamStore;
use crate::scalar::{logit, sigmoid, Real};
use crate::tensor::{Shape, Tensor};

pub const ANCHORS_PER_SCALE: usize = 3;
pub const FIELDS: usize = 5 + NUM_CLASSES;
pub const HEAD_OUTPUT_CHANNELS: usize = ANCHORS_PER_SCALE * FIELDS;
pub const SPP_KERNELS: [usize; 3] = [5, 9, 13];
pub const TW_CLAMP: f64 = 10.0;
pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;
pub const DEFAULT_NMS_IOU: f64 = 0.45;

/// YOLOv3 COCO priors at 416×416.
const COCO_ANCHORS_416: [(f64, f64); 9] = [
    (10.0, 13.0),
    (16.0, 30.0),
    (33.0, 23.0),
    (30.0, 61.0),
    (62.0, 45.0),
    (59.0, 119.0),
    (116.0, 90.0),
    (156.0, 198.0),
    (373.0, 326.0),
];

/// Nine (w, h) priors in input pixels, sorted by area.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    anchors: [(f64, f64); 9],
}

impl AnchorSet {
    pub fn new(mut anchors: [(f64, f64); 9]) -> Result<Self> {
        if anchors
            .iter()
            .any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite()))
        {
            return Err(invalid("anchors", "anchor sizes must be positive and finite"));
        }
        anchors.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
        Ok(Self { anchors })
    }

    /// COCO priors rescaled to `input_size`.
    pub fn fallback(input_size: usize) -> Self {
        let s = input_size as f64 / 416.0;
        Self::new(COCO_ANCHORS_416.map(|(w, h)| (w * s, h * s))).expect("static anchors are valid")
    }

    pub fn all(&self) -> &[(f64, f64); 9] {
        &self.anchors
    }

    /// The three anchors of a scale (0 = coarsest grid = largest anchors).
    pub fn group(&self, scale: usize) -> [(f64, f64); 3] {
        let start = 3 * (2 - scale);
        [self.anchors[start], self.anchors[start + 1], self.anchors[start + 2]]
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .anchors
            .iter()
            .flat_map(|&(w, h)| [T::lit(w), T::lit(h)])
            .collect();
        Tensor::new(Shape::new(1, 1, 9, 2), data).expect("9x2 anchors")
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        if t.shape() != Shape::new(1, 1, 9, 2) {
            return Err(invalid("anchors", format!("expected 1x1x9x2 tensor, got {}", t.shape())));
        }
        let d = t.data();
        let mut a = [(0.0, 0.0); 9];
        for (i, slot) in a.iter_mut().enumerate() {
            *slot = (d[2 * i].to_f64_lossy(), d[2 * i + 1].to_f64_lossy());
        }
        Self::new(a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleGeom {
    pub grid: usize,
    pub anchors: Vec<(f64, f64)>,
}

/// Grid sizes and anchors of every output scale, plus the input size they refer to.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub input_size: usize,
    pub scales: Vec<ScaleGeom>,
}

impl Geometry {
    pub fn three_scale(input_size: usize, anchors: &AnchorSet) -> Self {
        let scales = [32, 16, 8]
            .iter()
            .enumerate()
            .map(|(s, &stride)| ScaleGeom {
                grid: input_size / stride,
                anchors: anchors.group(s).to_vec(),
            })
            .collect();
        Self { input_size, scales }
    }

    pub fn slot_count(&self) -> usize {
        self.scales
            .iter()
            .map(|s| s.grid * s.grid * s.anchors.len())
            .sum()
    }
}

/// Raw regression outputs of one anchor slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLogits<T> {
    pub tx: T,
    pub ty: T,
    pub tw: T,
    pub th: T,
}

/// Channel of `field` for local anchor `a` in a head output.
#[inline]
pub fn channel(a: usize, field: usize) -> usize {
    a * FIELDS + field
}

/// Maps raw offsets in cell (row, col) of a K×K grid to a normalized box.
pub fn decode_box<T: Real>(t: BoxLogits<T>, row: usize, col: usize, grid: usize, anchor: (f64, f64), input_size: usize) -> BBox<T> {
    let k = T::from_usize_lossy(grid);
    let s = T::from_usize_lossy(input_size);
    let lim = T::lit(TW_CLAMP);
    BBox {
        cx: (sigmoid(t.tx) + T::from_usize_lossy(col)) / k,
        cy: (sigmoid(t.ty) + T::from_usize_lossy(row)) / k,
        w: T::lit(anchor.0) * t.tw.max(-lim).min(lim).exp() / s,
        h: T::lit(anchor.1) * t.th.max(-lim).min(lim).exp() / s,
        class_id: 0,
    }
}

/// Inverse of [`decode_box`] for a box whose center lies in cell (row, col).
pub fn encode_box<T: Real>(b: &BBox<T>, row: usize, col: usize, grid: usize, anchor: (f64, f64), input_size: usize) -> BoxLogits<T> {
    let k = T::from_usize_lossy(grid);
    let s = T::from_usize_lossy(input_size);
    BoxLogits {
        tx: logit(b.cx * k - T::from_usize_lossy(col)),
        ty: logit(b.cy * k - T::from_usize_lossy(row)),
        tw: (b.w * s / T::lit(anchor.0)).ln(),
        th: (b.h * s / T::lit(anchor.1)).ln(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub score: T,
    pub class_id: usize,
}

/// One detection per (cell, anchor, class) with `σ(obj)·σ(cls) ≥ conf_threshold`.
pub fn decode<T: Real>(raw: &Tensor<T>, batch: usize, scale: &ScaleGeom, input_size: usize, conf_threshold: f64) -> Result<Vec<Detection<T>>> {
    let s = raw.shape();
    let m = scale.anchors.len();
    if s.c != m * FIELDS || s.h != scale.grid || s.w != scale.grid || batch >= s.n {
        return Err(Error::ShapeMismatch {
            op: "decode",
            lhs: s,
            rhs: Shape::new(batch + 1, m * FIELDS, scale.grid, scale.grid),
        });
    }
    let thr = T::lit(conf_threshold);
    let mut out = Vec::new();
    for row in 0..scale.grid {
        for col in 0..scale.grid {
            for (a, &anchor) in scale.anchors.iter().enumerate() {
                let v = |f: usize| raw.at(batch, channel(a, f), row, col);
                let obj = sigmoid(v(4));
                let logits = BoxLogits {
                    tx: v(0),
                    ty: v(1),
                    tw: v(2),
                    th: v(3),
                };
                for c in 0..NUM_CLASSES {
                    let score = obj * sigmoid(v(5 + c));
                    if score >= thr && score > T::zero() {
                        let mut bbox = decode_box(logits, row, col, scale.grid, anchor, input_size);
                        bbox.class_id = c;
                        out.push(Detection {
                            bbox,
                            score,
                            class_id: c,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Processing order for NMS: score descending, then class id, then input position.
pub fn nms_order<T: Real>(dets: &[Detection<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| {
        dets[j]
            .score
            .partial_cmp(&dets[i].score)
            .unwrap_or(Ordering::Equal)
            .then(dets[i].class_id.cmp(&dets[j].class_id))
            .then(i.cmp(&j))
    });
    order
}

/// Greedy per-class suppression of boxes overlapping a higher-ranked keeper by more than `iou_threshold`.
pub fn nms<T: Real>(dets: &[Detection<T>], iou_threshold: f64) -> Vec<Detection<T>> {
    let thr = T::lit(iou_threshold);
    let mut kept: Vec<Detection<T>> = Vec::new();
    for i in nms_order(dets) {
        let d = dets[i];
        if kept
            .iter()
            .all(|k| k.class_id != d.class_id || iou(&k.bbox, &d.bbox) <= thr)
        {
            kept.push(d);
        }
    }
    kept
}

/// `image_id class_id score cx cy w h`, six decimals.
pub fn format_detection<T: Real>(image_id: &str, d: &Detection<T>) -> String {
    let f = |x: T| x.to_f64_lossy();
    format!(
        "{} {} {:.6} {:.6} {:.6} {:.6} {:.6}",
        image_id,
        d.class_id,
        f(d.score),
        f(d.bbox.cx),
        f(d.bbox.cy),
        f(d.bbox.w),
        f(d.bbox.h)
    )
}

pub fn format_detections<T: Real>(image_id: &str, dets: &[Detection<T>]) -> String {
    let mut s = String::new();
    for d in dets {
        let _ = writeln!(s, "{}", format_detection(image_id, d));
    }
    s
}

pub fn parse_detection(line: &str) -> std::result::Result<(String, Detection<f64>), String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 7 {
        return Err(format!("expected 7 fields, got {}: {line:?}", f.len()));
    }
    let class_id: usize = f[1].parse().map_err(|e| format!("class id {:?}: {e}", f[1]))?;
    if class_id >= NUM_CLASSES {
        return Err(format!("class id {class_id} out of range"));
    }
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    let bbox = BBox::new(num(f[3])?, num(f[4])?, num(f[5])?, num(f[6])?, class_id);
    Ok((
        f[0].to_string(),
        Detection {
            bbox,
            score: num(f[2])?,
            class_id,
        },
    ))
}

/// Identity branch plus stride-1 same-padded max pools of 5, 9 and 13.
pub fn spp<T: Real>(ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
    let mut parts = vec![x];
    for k in SPP_KERNELS {
        parts.push(ctx.graph.max_pool(x, k, 1, k / 2)?);
    }
    ctx.graph.concat_all(&parts)
}

/// Two 1×1/3×3 pairs followed by the 1×1 output conv.
#[derive(Debug, Clone)]
pub struct HeadBranch {
    pub pairs: Vec<(ConvBnAct, ConvBnAct)>,
    pub output: Conv,
}

impl HeadBranch {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, in_channels: usize, width: usize) -> Self {
        let half = (width / 2).max(1);
        let mut pairs = Vec::new();
        let mut c = in_channels;
        for p in 0..2 {
            let a = ConvBnAct::new(store, rng, &format!("{name}.pair{p}.reduce"), c, half, 1, 1);
            let b = ConvBnAct::new(store, rng, &format!("{name}.pair{p}.expand"), half, width, 3, 1);
            pairs.push((a, b));
            c = width;
        }
        let output = Conv::new(store, rng, &format!("{name}.output"), width, HEAD_OUTPUT_CHANNELS, 1, 1);
        // small output weights and a low objectness prior keep early losses bounded
        for v in store.get_mut(output.weight).data_mut() {
            *v *= T::lit(0.1);
        }
        let prior = T::lit((0.01f64 / 0.99).ln());
        let bias = store.get_mut(output.bias).data_mut();
        for a in 0..ANCHORS_PER_SCALE {
            bias[channel(a, 4)] = prior;
        }
        Self { pairs, output }
    }

    /// Returns `(feature, raw_prediction)`.
    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for (a, b) in &self.pairs {
            h = a.forward(ctx, h)?;
            h = b.forward(ctx, h)?;
        }
        let raw = self.output.forward(ctx, h)?;
        Ok((h, raw))
    }
}

#[derive(Debug, Clone)]
pub struct DetectionHeads {
    pub small: HeadBranch,
    pub route_small: ConvBnAct,
    pub mid: HeadBranch,
    pub route_mid: ConvBnAct,
    pub large: HeadBranch,
}

/// Raw predictions ordered coarse to fine.
#[derive(Debug, Clone, Copy)]
pub struct RawPredictions {
    pub scales: [Var; 3],
}

impl DetectionHeads {
    /// `tap_channels` are (stride 8, stride 16, stride 32) widths.
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, tap_channels: [usize; 3], width: usize) -> Self {
        let half = (width / 2).max(1);
        let small = HeadBranch::new(store, rng, "head.small", 4 * tap_channels[2], width);
        let route_small = ConvBnAct::new(store, rng, "head.route_small", width, half, 1, 1);
        let mid = HeadBranch::new(store, rng, "head.mid", half + tap_channels[1], width);
        let route_mid = ConvBnAct::new(store, rng, "head.route_mid", width, half, 1, 1);
        let large = HeadBranch::new(store, rng, "head.large", half + tap_channels[0], width);
        Self {
            small,
            route_small,
            mid,
            route_mid,
            large,
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, taps: &FeatureTaps) -> Result<RawPredictions> {
        let (sl, sm, ss) = (
            ctx.graph.shape(taps.large),
            ctx.graph.shape(taps.mid),
            ctx.graph.shape(taps.small),
        );
        if sm.h != 2 * ss.h || sm.w != 2 * ss.w || sl.h != 2 * sm.h || sl.w != 2 * sm.w {
            return Err(Error::ShapeMismatch {
                op: "build_heads",
                lhs: sl,
                rhs: ss,
            });
        }
        let pooled = spp(ctx, taps.small)?;
        let (f_small, raw_small) = self.small.forward(ctx, pooled)?;

        let r = self.route_small.forward(ctx, f_small)?;
        let r = ctx.graph.upsample(r, 2)?;
        let x = ctx.graph.concat(r, taps.mid)?;
        let (f_mid, raw_mid) = self.mid.forward(ctx, x)?;

        let r = self.route_mid.forward(ctx, f_mid)?;
        let r = ctx.graph.upsample(r, 2)?;
        let x = ctx.graph.concat(r, taps.large)?;
        let (_, raw_large) = self.large.forward(ctx, x)?;

        Ok(RawPredictions {
            scales: [raw_small, raw_mid, raw_large],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn det(cx: f64, cy: f64, w: f64, h: f64, score: f64, class_id: usize) -> Detection<f64> {
        Detection {
            bbox: BBox::new(cx, cy, w, h, class_id),
            score,
            class_id,
        }
    }

    #[test]
    fn anchor_groups_by_area() {
        let a = AnchorSet::fallback(416);
        assert_eq!(a.group(0)[2], (373.0, 326.0));
        assert_eq!(a.group(2)[0], (10.0, 13.0));
        let g = Geometry::three_scale(64, &a);
        assert_eq!(g.scales.iter().map(|s| s.grid).collect::<Vec<_>>(), vec![2, 4, 8]);
        assert_eq!(g.slot_count(), 3 * (4 + 16 + 64));
        assert!(AnchorSet::new([(1.0, 0.0); 9]).is_err());
        let t = a.to_tensor::<f64>();
        assert_eq!(AnchorSet::from_tensor(&t).unwrap(), a);
    }

    #[test]
    fn decode_closed_forms() {
        let z = BoxLogits {
            tx: 0.0f64,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        };
        let b = decode_box(z, 0, 0, 13, (30.0, 60.0), 416);
        assert!((b.cx - 0.5 / 13.0).abs() < 1e-15);
        assert!((b.cy - 0.5 / 13.0).abs() < 1e-15);
        assert!((b.w - 30.0 / 416.0).abs() < 1e-15);
        assert!((b.h - 60.0 / 416.0).abs() < 1e-15);
        let huge = BoxLogits { tw: 1e6, ..z };
        assert!(decode_box(huge, 0, 0, 13, (30.0, 60.0), 416).w.is_finite());
    }

    #[test]
    fn decode_filters_low_objectness() {
        let geom = ScaleGeom {
            grid: 2,
            anchors: vec![(8.0, 8.0); 3],
        };
        let mut raw = Tensor::<f64>::full(Shape::new(1, HEAD_OUTPUT_CHANNELS, 2, 2), 0.0);
        for a in 0..3 {
            for r in 0..2 {
                for c in 0..2 {
                    raw.set(0, channel(a, 4), r, c, -40.0);
                }
            }
        }
        assert!(decode(&raw, 0, &geom, 64, DEFAULT_CONF_THRESHOLD).unwrap().is_empty());
        raw.set(0, channel(1, 4), 1, 0, 40.0);
        raw.set(0, channel(1, 5), 1, 0, 40.0);
        raw.set(0, channel(1, 6), 1, 0, -40.0);
        let d = decode(&raw, 0, &geom, 64, DEFAULT_CONF_THRESHOLD).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].class_id, 0);
        assert!((d[0].bbox.cx - 0.25).abs() < 1e-12 && (d[0].bbox.cy - 0.75).abs() < 1e-12);
        assert!(decode(&raw, 1, &geom, 64, 0.25).is_err());
    }

    #[test]
    fn encode_inverts_decode() {
        let anchor = (12.0, 20.0);
        let b = BBox::new(0.37f64, 0.81, 0.2, 0.45, 0);
        let (row, col) = ((0.81f64 * 8.0) as usize, (0.37f64 * 8.0) as usize);
        let t = encode_box(&b, row, col, 8, anchor, 64);
        let d = decode_box(t, row, col, 8, anchor, 64);
        for (x, y) in [(d.cx, b.cx), (d.cy, b.cy), (d.w, b.w), (d.h, b.h)] {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nms_trivial_cases() {
        let one = vec![det(0.5, 0.5, 0.2, 0.2, 0.3, 1)];
        assert_eq!(nms(&one, 0.5), one);
        let two = vec![det(0.5, 0.5, 0.2, 0.2, 0.8, 0), det(0.5, 0.5, 0.2, 0.2, 0.9, 0)];
        let kept = nms(&two, 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
        // different classes never suppress each other
        let mixed = vec![det(0.5, 0.5, 0.2, 0.2, 0.8, 0), det(0.5, 0.5, 0.2, 0.2, 0.9, 1)];
        assert_eq!(nms(&mixed, 0.5).len(), 2);
    }

    #[test]
    fn detection_line_round_trip() {
        let d = det(0.123456, 0.5, 0.25, 0.75, 0.9, 1);
        let line = format_detection("img_001", &d);
        assert_eq!(line, "img_001 1 0.900000 0.123456 0.500000 0.250000 0.750000");
        let (id, back) = parse_detection(&line).unwrap();
        assert_eq!(id, "img_001");
        assert_eq!(back, d);
        assert!(parse_detection("a 7 0.1 0 0 1 1").is_err());
        assert!(parse_detection("a 0 0.1").is_err());
    }

    #[test]
    fn spp_quadruples_channels_and_keeps_constants() {
        let store = ParamStore::<f64>::new();
        for c in [1, 3, 8] {
            let mut ctx = Ctx::new(&store, Mode::Eval);
            let x = ctx.graph.input(Tensor::full(Shape::new(1, c, 5, 5), 2.5));
            let y = spp(&mut ctx, x).unwrap();
            assert_eq!(ctx.graph.shape(y), Shape::new(1, 4 * c, 5, 5));
            assert!(ctx.graph.value(y).data().iter().all(|&v| v == 2.5));
        }
    }

    #[test]
    fn heads_emit_21_channels_per_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let heads = DetectionHeads::new(&mut store, &mut rng, [12, 10, 8], 16);
        let mut ctx = Ctx::new(&store, Mode::Train);
        let taps = FeatureTaps {
            large: ctx.graph.input(Tensor::randn(Shape::new(1, 12, 8, 8), 1.0, &mut rng)),
            mid: ctx.graph.input(Tensor::randn(Shape::new(1, 10, 4, 4), 1.0, &mut rng)),
            small: ctx.graph.input(Tensor::randn(Shape::new(1, 8, 2, 2), 1.0, &mut rng)),
        };
        let raw = heads.forward(&mut ctx, &taps).unwrap();
        for (v, k) in raw.scales.iter().zip([2, 4, 8]) {
            assert_eq!(ctx.graph.shape(*v), Shape::new(1, 21, k, k));
        }
        let bad = FeatureTaps {
            large: taps.mid,
            mid: taps.mid,
            small: taps.small,
        };
        assert!(heads.forward(&mut ctx, &bad).is_err());
    }
}
