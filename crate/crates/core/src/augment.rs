//! Mosaic four-image composition and per-image flips and color jitter.
//!
//! Images are `1×3×H×W` tensors in [0, 1]; boxes are normalized to the image
//! they belong to.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{invalid, Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f64>,
    pub boxes: Vec<BBox<f64>>,
}

impl Sample {
    pub fn new(image: Tensor<f64>, boxes: Vec<BBox<f64>>) -> Result<Self> {
        let s = image.shape();
        if s.n != 1 || s.c != 3 || s.h == 0 || s.w == 0 {
            return Err(Error::ShapeMismatch {
                op: "sample",
                lhs: s,
                rhs: Shape::new(1, 3, s.h.max(1), s.w.max(1)),
            });
        }
        Ok(Self { image, boxes })
    }

    pub fn width(&self) -> usize {
        self.image.shape().w
    }

    pub fn height(&self) -> usize {
        self.image.shape().h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    /// Hue shift drawn from `[-hue, hue]`, in turns.
    pub hue: f64,
    /// Saturation factor drawn from `[1/saturation, saturation]`.
    pub saturation: f64,
    /// Additive brightness drawn from `[-brightness, brightness]`.
    pub brightness: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            hue: 0.02,
            saturation: 1.5,
            brightness: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicConfig {
    pub out_size: usize,
    /// Split point range as fractions of `out_size`.
    pub center_jitter: (f64, f64),
    pub min_box_pixels: f64,
    pub seed: u64,
    /// Extra zoom beyond the minimum cover scale.
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter: ColorJitter,
}

impl MosaicConfig {
    pub fn new(out_size: usize) -> Self {
        Self {
            out_size,
            center_jitter: (0.3, 0.7),
            min_box_pixels: 2.0,
            seed: 0,
            scale_range: (1.0, 1.5),
            flip_prob: 0.5,
            jitter: ColorJitter::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.center_jitter;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return Err(invalid("mosaic", format!("center_jitter ({lo}, {hi}) must satisfy 0 < lo < hi < 1")));
        }
        if self.out_size < 2 {
            return Err(invalid("mosaic", "out_size must be >= 2"));
        }
        let (a, b) = self.scale_range;
        if !(1.0 <= a && a <= b) {
            return Err(invalid("mosaic", "scale_range must satisfy 1 <= lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || self.min_box_pixels < 0.0 {
            return Err(invalid("mosaic", "flip_prob must be in [0,1] and min_box_pixels >= 0"));
        }
        Ok(())
    }
}

/// Mirror left-right; `cx ↦ 1 − cx`.
pub fn hflip(s: &Sample) -> Sample {
    let shape = s.image.shape();
    let image = Tensor::from_fn(shape, |n, c, y, x| s.image.at(n, c, y, shape.w - 1 - x));
    let boxes = s
        .boxes
        .iter()
        .map(|b| BBox {
            cx: 1.0 - b.cx,
            ..*b
        })
        .collect();
    Sample { image, boxes }
}

/// RGB in [0,1] to (hue in turns, saturation, value).
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Hue rotation and saturation scaling in HSV, then an additive brightness
/// shift on every channel; results are clamped to [0, 1]. Boxes are unchanged.
pub fn photometric(s: &Sample, brightness: f64, saturation: f64, hue_shift: f64) -> Sample {
    let shape = s.image.shape();
    let plane = shape.plane();
    let src = s.image.data();
    let mut out = src.to_vec();
    let hsv_needed = hue_shift != 0.0 || saturation != 1.0;
    for i in 0..plane {
        let (mut r, mut g, mut b) = (src[i], src[plane + i], src[2 * plane + i]);
        if hsv_needed {
            let (h, sat, v) = rgb_to_hsv(r, g, b);
            (r, g, b) = hsv_to_rgb(h + hue_shift, (sat * saturation).clamp(0.0, 1.0), v);
        }
        out[i] = (r + brightness).clamp(0.0, 1.0);
        out[plane + i] = (g + brightness).clamp(0.0, 1.0);
        out[2 * plane + i] = (b + brightness).clamp(0.0, 1.0);
    }
    Sample {
        image: Tensor::new(shape, out).expect("same shape"),
        boxes: s.boxes.clone(),
    }
}

/// Bilinear sample at continuous pixel coordinates, edges clamped.
fn bilinear(img: &Tensor<f64>, c: usize, x: f64, y: f64) -> f64 {
    let s = img.shape();
    let x = x.clamp(0.0, (s.w - 1) as f64);
    let y = y.clamp(0.0, (s.h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(s.w - 1);
    let y1 = (y0 + 1).min(s.h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img.at(0, c, y0, x0) * (1.0 - fx) + img.at(0, c, y0, x1) * fx;
    let bot = img.at(0, c, y1, x0) * (1.0 - fx) + img.at(0, c, y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Bilinear resize with pixel-center alignment.
pub fn resize(img: &Tensor<f64>, out_w: usize, out_h: usize) -> Tensor<f64> {
    let s = img.shape();
    let rx = out_w as f64 / s.w as f64;
    let ry = out_h as f64 / s.h as f64;
    Tensor::from_fn(Shape::new(1, 3, out_h, out_w), |_, c, y, x| {
        bilinear(img, c, (x as f64 + 0.5) / rx - 0.5, (y as f64 + 0.5) / ry - 0.5)
    })
}

/// Resizes a sample to a square network input, boxes unchanged (they are normalized).
pub fn resize_sample(s: &Sample, size: usize) -> Sample {
    if s.width() == size && s.height() == size {
        return s.clone();
    }
    Sample {
        image: resize(&s.image, size, size),
        boxes: s.boxes.clone(),
    }
}

/// Transform applied to one source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TilePlan {
    pub flip: bool,
    /// Multiplier on the minimum scale that covers the quadrant.
    pub zoom: f64,
    /// Fraction of the spare resized extent cropped from the left/top.
    pub offset: (f64, f64),
    pub brightness: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl TilePlan {
    pub const IDENTITY: TilePlan = TilePlan {
        flip: false,
        zoom: 1.0,
        offset: (0.0, 0.0),
        brightness: 0.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MosaicPlan {
    /// Split point in output pixels.
    pub split: (usize, usize),
    /// TL, TR, BL, BR.
    pub tiles: [TilePlan; 4],
}

impl MosaicPlan {
    pub fn draw<R: Rng + ?Sized>(cfg: &MosaicConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.out_size as f64;
        let (lo, hi) = cfg.center_jitter;
        let clamp_split = |v: f64| (v.round() as usize).clamp(1, cfg.out_size - 1);
        let px = clamp_split(rng.random_range(lo..hi) * s);
        let py = clamp_split(rng.random_range(lo..hi) * s);
        let mut tiles = [TilePlan::IDENTITY; 4];
        for t in &mut tiles {
            let j = cfg.jitter;
            *t = TilePlan {
                flip: rng.random::<f64>() < cfg.flip_prob,
                zoom: if cfg.scale_range.1 > cfg.scale_range.0 {
                    rng.random_range(cfg.scale_range.0..cfg.scale_range.1)
                } else {
                    cfg.scale_range.0
                },
                offset: (rng.random::<f64>(), rng.random::<f64>()),
                brightness: if j.brightness > 0.0 {
                    rng.random_range(-j.brightness..j.brightness)
                } else {
                    0.0
                },
                saturation: if j.saturation > 1.0 {
                    rng.random_range(j.saturation.recip()..j.saturation)
                } else {
                    1.0
                },
                hue: if j.hue > 0.0 { rng.random_range(-j.hue..j.hue) } else { 0.0 },
            };
        }
        Ok(Self { split: (px, py), tiles })
    }

    /// Quadrant rectangles `(x0, y0, w, h)` in TL, TR, BL, BR order.
    pub fn quadrants(&self, out_size: usize) -> [(usize, usize, usize, usize); 4] {
        let (px, py) = self.split;
        [
            (0, 0, px, py),
            (px, 0, out_size - px, py),
            (0, py, px, out_size - py),
            (px, py, out_size - px, out_size - py),
        ]
    }
}

/// Output box plus the index of the quadrant it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct MosaicOutput {
    pub sample: Sample,
    pub source_quadrant: Vec<usize>,
}

/// Places the four transformed inputs into their quadrants according to `plan`.
pub fn compose(samples: &[Sample], plan: &MosaicPlan, cfg: &MosaicConfig) -> Result<MosaicOutput> {
    if samples.len() != 4 {
        return Err(invalid("mosaic", format!("expected 4 samples, got {}", samples.len())));
    }
    let size = cfg.out_size;
    let (px, py) = plan.split;
    if px == 0 || py == 0 || px >= size || py >= size {
        return Err(invalid("mosaic", format!("split ({px}, {py}) outside the canvas")));
    }
    let mut canvas = vec![0.0; 3 * size * size];
    let plane = size * size;
    let mut boxes = Vec::new();
    let mut source_quadrant = Vec::new();
    for (q, ((x0, y0, qw, qh), (src, tile))) in plan
        .quadrants(size)
        .into_iter()
        .zip(samples.iter().zip(&plan.tiles))
        .enumerate()
    {
        let mut s = if tile.flip { hflip(src) } else { src.clone() };
        if tile.brightness != 0.0 || tile.saturation != 1.0 || tile.hue != 0.0 {
            s = photometric(&s, tile.brightness, tile.saturation, tile.hue);
        }
        let (sw, sh) = (s.width() as f64, s.height() as f64);
        let r = (qw as f64 / sw).max(qh as f64 / sh) * tile.zoom;
        let ox = (sw * r - qw as f64).max(0.0) * tile.offset.0;
        let oy = (sh * r - qh as f64).max(0.0) * tile.offset.1;
        for y in 0..qh {
            for x in 0..qw {
                let sx = (x as f64 + 0.5 + ox) / r - 0.5;
                let sy = (y as f64 + 0.5 + oy) / r - 0.5;
                let i = (y0 + y) * size + x0 + x;
                for c in 0..3 {
                    canvas[c * plane + i] = bilinear(&s.image, c, sx, sy);
                }
            }
        }
        let (qx0, qy0) = (x0 as f64, y0 as f64);
        let (qx1, qy1) = ((x0 + qw) as f64, (y0 + qh) as f64);
        for b in &s.boxes {
            let (bx1, by1, bx2, by2) = b.corners();
            let map_x = |v: f64| qx0 + v * sw * r - ox;
            let map_y = |v: f64| qy0 + v * sh * r - oy;
            let x1 = map_x(bx1).clamp(qx0, qx1);
            let x2 = map_x(bx2).clamp(qx0, qx1);
            let y1 = map_y(by1).clamp(qy0, qy1);
            let y2 = map_y(by2).clamp(qy0, qy1);
            if x2 - x1 < cfg.min_box_pixels || y2 - y1 < cfg.min_box_pixels || x2 <= x1 || y2 <= y1 {
                continue;
            }
            let n = size as f64;
            boxes.push(BBox::from_corners(x1 / n, y1 / n, x2 / n, y2 / n, b.class_id));
            source_quadrant.push(q);
        }
    }
    Ok(MosaicOutput {
        sample: Sample {
            image: Tensor::new(Shape::new(1, 3, size, size), canvas).expect("canvas shape"),
            boxes,
        },
        source_quadrant,
    })
}

pub fn mosaic<R: Rng + ?Sized>(samples: &[Sample], cfg: &MosaicConfig, rng: &mut R) -> Result<Sample> {
    if samples.len() != 4 {
        return Err(invalid("mosaic", format!("expected 4 samples, got {}", samples.len())));
    }
    let plan = MosaicPlan::draw(cfg, rng)?;
    Ok(compose(samples, &plan, cfg)?.sample)
}

/// [`mosaic`] driven by `cfg.seed`.
pub fn mosaic_seeded(samples: &[Sample], cfg: &MosaicConfig) -> Result<Sample> {
    mosaic(samples, cfg, &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

/// Canvas as 8-bit RGB bytes (interleaved), the form used for golden hashes and previews.
pub fn to_rgb8(img: &Tensor<f64>) -> Vec<u8> {
    let s = img.shape();
    let mut out = Vec::with_capacity(3 * s.h * s.w);
    for y in 0..s.h {
        for x in 0..s.w {
            for c in 0..3 {
                out.push((img.at(0, c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    out
}
