//! Frame-level classification rates and Pascal VOC detection mAP.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox, CLASS_NAMES, NUM_CLASSES};
use crate::dataset::{read_list, read_voc_xml, resolve_entry};
use crate::detector::Detection;
use crate::error::{invalid, Result};

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationMetrics {
    pub counts: ConfusionCounts,
    /// `FP / (FP + TN)`; `None` without negatives.
    pub fp_rate: Option<f64>,
    /// `FN / (FN + TP)`; `None` without positives.
    pub fn_rate: Option<f64>,
    pub accuracy: f64,
}

/// `true` is Fire.
pub fn classification_metrics(preds: &[bool], truth: &[bool]) -> Result<ClassificationMetrics> {
    if preds.is_empty() || preds.len() != truth.len() {
        return Err(invalid(
            "classification_metrics",
            format!("{} predictions for {} labels (need equal, non-zero counts)", preds.len(), truth.len()),
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &t) in preds.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(ClassificationMetrics {
        counts: c,
        fp_rate: ratio(c.fp, c.fp + c.tn),
        fn_rate: ratio(c.fn_, c.fn_ + c.tp),
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApMode {
    /// Area under the precision envelope.
    AllPoints,
    ElevenPoint,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` in score order.
    pub points: Vec<(f64, f64)>,
    pub mode: ApMode,
}

/// A detection tagged with the image it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image_id: String,
    pub det: Detection<f64>,
}

pub type GroundTruth = BTreeMap<String, Vec<BBox<f64>>>;

/// TP/FP flags of the class-`class_id` detections in descending score order
/// (ties keep input order), plus the number of ground truths of that class.
///
/// Each detection claims the highest-IoU still-unmatched ground truth of its
/// class in its image when that IoU reaches `iou_thresh`.
pub fn match_detections(dets: &[ImageDetection], gts: &GroundTruth, class_id: usize, iou_thresh: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<&ImageDetection> = dets.iter().filter(|d| d.det.class_id == class_id).collect();
    order.sort_by(|a, b| b.det.score.total_cmp(&a.det.score));
    let n_gt = gts
        .values()
        .map(|v| v.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    let mut used: BTreeMap<&str, Vec<bool>> = gts
        .iter()
        .map(|(k, v)| (k.as_str(), vec![false; v.len()]))
        .collect();
    let flags = order
        .iter()
        .map(|d| {
            let Some(image_gts) = gts.get(&d.image_id) else {
                return false;
            };
            let taken = used.get_mut(d.image_id.as_str()).expect("same keys");
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in image_gts.iter().enumerate() {
                if g.class_id != class_id || taken[gi] {
                    continue;
                }
                let o = iou(&d.det.bbox, g);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((gi, o));
                }
            }
            match best {
                Some((gi, _)) => {
                    taken[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (flags, n_gt)
}

pub fn pr_curve(flags: &[bool], n_gt: usize, mode: ApMode) -> PrCurve {
    let mut tp = 0usize;
    let points = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += f as usize;
            let recall = if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 };
            (recall, tp as f64 / (i + 1) as f64)
        })
        .collect();
    PrCurve { points, mode }
}

pub fn voc_ap(curve: &PrCurve) -> f64 {
    match curve.mode {
        ApMode::AllPoints => {
            let mut rec = vec![0.0];
            let mut prec = vec![0.0];
            for &(r, p) in &curve.points {
                rec.push(r);
                prec.push(p);
            }
            rec.push(1.0);
            prec.push(0.0);
            for i in (0..prec.len() - 1).rev() {
                prec[i] = prec[i].max(prec[i + 1]);
            }
            (1..rec.len())
                .filter(|&i| rec[i] != rec[i - 1])
                .map(|i| (rec[i] - rec[i - 1]) * prec[i])
                .sum()
        }
        ApMode::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    curve
                        .points
                        .iter()
                        .filter(|(r, _)| *r >= t)
                        .map(|&(_, p)| p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    /// `None` for classes without ground truth.
    pub per_class: [Option<f64>; NUM_CLASSES],
    /// Mean over classes that have ground truth.
    pub mean: f64,
}

pub fn mean_average_precision(dets: &[ImageDetection], gts: &GroundTruth, mode: ApMode, iou_thresh: f64) -> MapResult {
    let mut per_class = [None; NUM_CLASSES];
    for (c, slot) in per_class.iter_mut().enumerate() {
        let (flags, n_gt) = match_detections(dets, gts, c, iou_thresh);
        if n_gt > 0 {
            *slot = Some(voc_ap(&pr_curve(&flags, n_gt, mode)));
        }
    }
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    MapResult { per_class, mean }
}

/// Fraction of images with ground truth in which at least one object is found.
pub fn detection_rate(dets: &[ImageDetection], gts: &GroundTruth, iou_thresh: f64) -> Option<f64> {
    let with_gt: Vec<&String> = gts.iter().filter(|(_, v)| !v.is_empty()).map(|(k, _)| k).collect();
    if with_gt.is_empty() {
        return None;
    }
    let hit = with_gt
        .iter()
        .filter(|id| {
            dets.iter().any(|d| {
                &d.image_id == **id
                    && gts[**id]
                        .iter()
                        .any(|g| g.class_id == d.det.class_id && iou(&d.det.bbox, g) >= iou_thresh)
            })
        })
        .count();
    Some(hit as f64 / with_gt.len() as f64)
}

/// Ground truth of a manifest keyed by image file stem.
pub fn load_ground_truth(manifest: &Path) -> Result<GroundTruth> {
    let mut out = GroundTruth::new();
    for e in read_list(manifest)? {
        let (img, xml) = resolve_entry(manifest, &e);
        let id = img
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or(e);
        out.insert(id, read_voc_xml(&xml)?.to_boxes());
    }
    Ok(out)
}

fn pct(v: Option<f64>) -> String {
    v.map(|v| format!("{:.2}%", 100.0 * v)).unwrap_or_else(|| "N/A".into())
}

pub fn classification_table(method: &str, m: &ClassificationMetrics) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>8} {:>8} {:>9}", "Method", "FP Rate", "FN Rate", "Accuracy");
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>8} {:>9}",
        method,
        pct(m.fp_rate),
        pct(m.fn_rate),
        pct(Some(m.accuracy))
    );
    s
}

pub fn map_table(method: &str, backbone: &str, r: &MapResult) -> String {
    let ap = |v: Option<f64>| v.map(|v| format!("{v:.3}")).unwrap_or_else(|| "N/A".into());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<12} {:>6} {:>6} {:>6}",
        "Method", "Backbone", "Fire", "Smoke", "mAP"
    );
    let _ = writeln!(
        s,
        "{:<12} {:<12} {:>6} {:>6} {:>6.3}",
        method,
        backbone,
        ap(r.per_class[0]),
        ap(r.per_class[1]),
        r.mean
    );
    debug_assert_eq!(CLASS_NAMES, ["fire", "smoke"]);
    s
}

/// Last whitespace-separated token of each non-empty line as a 0/1 label.
pub fn parse_labels(text: &str) -> std::result::Result<Vec<bool>, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| match l.split_whitespace().last() {
            Some("1") | Some("fire") | Some("Fire") => Ok(true),
            Some("0") | Some("normal") | Some("Normal") => Ok(false),
            _ => Err(format!("cannot read a 0/1 label from {l:?}")),
        })
        .collect()
}
