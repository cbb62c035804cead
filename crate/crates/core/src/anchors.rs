//! Anchor shapes by k-means over box sizes with `1 - IoU` as the distance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::shape_iou;
use crate::detector::AnchorSet;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub iterations: usize,
    /// Independent k-means++ starts; the best mean IoU wins.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 9,
            iterations: 100,
            restarts: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KmeansResult {
    /// Sorted by area, ascending.
    pub centers: Vec<(f64, f64)>,
    pub mean_iou: f64,
}

/// Mean over shapes of the best IoU against any center.
pub fn mean_best_iou(shapes: &[(f64, f64)], centers: &[(f64, f64)]) -> f64 {
    shapes
        .iter()
        .map(|&(w, h)| {
            centers
                .iter()
                .map(|&(cw, ch)| shape_iou(w, h, cw, ch))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / shapes.len() as f64
}

fn nearest(shape: (f64, f64), centers: &[(f64, f64)]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, &(cw, ch)) in centers.iter().enumerate() {
        let d = 1.0 - shape_iou(shape.0, shape.1, cw, ch);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn plus_plus_init(shapes: &[(f64, f64)], k: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let mut centers = vec![shapes[rng.random_range(0..shapes.len())]];
    while centers.len() < k {
        let d2: Vec<f64> = shapes.iter().map(|&s| nearest(s, &centers).1.powi(2)).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            rng.random_range(0..shapes.len())
        } else {
            let mut r = rng.random::<f64>() * total;
            let mut idx = shapes.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if r < d {
                    idx = i;
                    break;
                }
                r -= d;
            }
            idx
        };
        centers.push(shapes[pick]);
    }
    centers
}

/// Lloyd iterations from the given centers until assignments stop changing.
pub fn lloyd(shapes: &[(f64, f64)], mut centers: Vec<(f64, f64)>, iterations: usize) -> Vec<(f64, f64)> {
    let mut labels = vec![usize::MAX; shapes.len()];
    for _ in 0..iterations {
        let mut changed = false;
        for (s, l) in shapes.iter().zip(labels.iter_mut()) {
            let n = nearest(*s, &centers).0;
            changed |= n != *l;
            *l = n;
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0.0, 0.0, 0usize); centers.len()];
        for (&(w, h), &l) in shapes.iter().zip(&labels) {
            sums[l].0 += w;
            sums[l].1 += h;
            sums[l].2 += 1;
        }
        for (c, &(sw, sh, n)) in centers.iter_mut().zip(&sums) {
            if n > 0 {
                *c = (sw / n as f64, sh / n as f64);
            }
        }
    }
    centers
}

pub fn kmeans(shapes: &[(f64, f64)], cfg: &KmeansConfig) -> Result<KmeansResult> {
    if shapes.is_empty() {
        return Err(invalid("kmeans", "no box shapes"));
    }
    if cfg.k == 0 || cfg.restarts == 0 {
        return Err(invalid("kmeans", "k and restarts must be positive"));
    }
    if shapes.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite())) {
        return Err(invalid("kmeans", "box shapes must be positive and finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KmeansResult> = None;
    for _ in 0..cfg.restarts {
        let init = plus_plus_init(shapes, cfg.k, &mut rng);
        let centers = lloyd(shapes, init, cfg.iterations);
        let mean_iou = mean_best_iou(shapes, &centers);
        if best.as_ref().is_none_or(|b| mean_iou > b.mean_iou) {
            best = Some(KmeansResult { centers, mean_iou });
        }
    }
    let mut best = best.expect("at least one restart");
    best.centers.sort_by(|a, b| (a.0 * a.1).total_cmp(&(b.0 * b.1)));
    Ok(best)
}

/// Nine anchors in pixels of an `input_size` canvas from normalized box sizes.
pub fn anchors_from_boxes(normalized_shapes: &[(f64, f64)], input_size: usize, seed: u64) -> Result<AnchorSet> {
    let s = input_size as f64;
    let px: Vec<(f64, f64)> = normalized_shapes.iter().map(|&(w, h)| (w * s, h * s)).collect();
    let r = kmeans(&px, &KmeansConfig { seed, ..Default::default() })?;
    let mut arr = [(0.0, 0.0); 9];
    arr.copy_from_slice(&r.centers);
    AnchorSet::new(arr)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_shape() {
        let r = kmeans(&[(12.0, 7.0); 5], &KmeansConfig::default()).unwrap();
        assert!(r.centers.iter().all(|&c| c == (12.0, 7.0)));
        assert_eq!(r.mean_iou, 1.0);
    }

    #[test]
    fn two_shapes() {
        let mut shapes = vec![(4.0, 4.0); 6];
        shapes.extend(vec![(30.0, 12.0); 4]);
        let r = kmeans(&shapes, &KmeansConfig { k: 2, ..Default::default() }).unwrap();
        assert_eq!(r.centers, vec![(4.0, 4.0), (30.0, 12.0)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kmeans(&[], &KmeansConfig::default()).is_err());
        assert!(kmeans(&[(0.0, 1.0)], &KmeansConfig::default()).is_err());
    }
}
