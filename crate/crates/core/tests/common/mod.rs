#![allow(dead_code)]

use std::path::Path;

use firedet::augment::Sample;
use firedet::boxes::BBox;
use firedet::config::RunConfig;
use firedet::dataset::{write_voc_xml, VocAnnotation, VocObject};
use firedet::image::{write_ppm, RgbImage};
use firedet::tensor::{Shape, Tensor};

pub const FIRE_RGB: [f64; 3] = [0.95, 0.45, 0.1];
pub const SMOKE_RGB: [f64; 3] = [0.7, 0.7, 0.72];

/// Four 64×64 images, flat backgrounds with painted boxes `(cx, cy, w, h, class)` in pixels.
pub fn overfit_fixture() -> Vec<Sample> {
    let specs: [([f64; 3], &[(f64, f64, f64, f64, usize)]); 4] = [
        ([0.15, 0.2, 0.3], &[(20.0, 28.0, 16.0, 20.0, 0)]),
        ([0.2, 0.25, 0.2], &[(44.0, 20.0, 32.0, 24.0, 1), (12.0, 52.0, 12.0, 12.0, 0)]),
        ([0.1, 0.1, 0.15], &[(36.0, 36.0, 40.0, 32.0, 0)]),
        ([0.25, 0.2, 0.25], &[(20.0, 28.0, 20.0, 28.0, 1), (52.0, 52.0, 24.0, 16.0, 0)]),
    ];
    specs
        .iter()
        .map(|(bg, boxes)| painted(64, *bg, boxes))
        .collect()
}

pub fn painted(size: usize, bg: [f64; 3], boxes: &[(f64, f64, f64, f64, usize)]) -> Sample {
    let mut img = Tensor::from_fn(Shape::new(1, 3, size, size), |_, c, _, _| bg[c]);
    let n = size as f64;
    let mut out = Vec::new();
    for &(cx, cy, w, h, cls) in boxes {
        let col = if cls == 0 { FIRE_RGB } else { SMOKE_RGB };
        for y in (cy - h / 2.0) as usize..(cy + h / 2.0) as usize {
            for x in (cx - w / 2.0) as usize..(cx + w / 2.0) as usize {
                for (c, v) in col.iter().enumerate() {
                    img.set(0, c, y, x, *v);
                }
            }
        }
        out.push(BBox::new(cx / n, cy / n, w / n, h / n, cls));
    }
    Sample::new(img, out).unwrap()
}

/// Default config with augmentation switched off, so the network sees the
/// fixture images exactly.
pub fn overfit_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.train.mosaic_prob = 0.0;
    cfg.train.flip_prob = 0.0;
    cfg.train.jitter.hue = 0.0;
    cfg.train.jitter.saturation = 1.0;
    cfg.train.jitter.brightness = 0.0;
    cfg
}

/// Splitmix-style deterministic noise in `[-1, 1]`.
pub fn hash_noise(i: u64) -> f64 {
    let mut z = i.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 52) as f64 - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Planted {
    Keep,
    Proportion,
    Snr,
    Color,
}

pub struct FilterCase {
    pub id: String,
    pub planted: Planted,
    pub image: RgbImage,
    pub ann: VocAnnotation,
}

fn object(name: &str, x1: u32, y1: u32, x2: u32, y2: u32) -> VocObject {
    VocObject {
        name: name.into(),
        xmin: x1,
        ymin: y1,
        xmax: x2,
        ymax: y2,
    }
}

/// Thirty 32×32 images: 10 clean, 6 with too little annotated area, 7 noisy
/// and 7 dominated by fire-colored pixels. Proportion cases 0 and 1 also break
/// the color rule; the first failing rule must win.
pub fn filter_fixture() -> Vec<FilterCase> {
    const S: u32 = 32;
    let mut out = Vec::new();
    let mut push = |planted: Planted, image: RgbImage, objects: Vec<VocObject>| {
        let id = format!("img{:02}", out.len());
        out.push(FilterCase {
            ann: VocAnnotation {
                filename: format!("{id}.ppm"),
                width: S,
                height: S,
                depth: 3,
                objects,
            },
            id,
            planted,
            image,
        });
    };
    let bluish = |k: u32| RgbImage::filled(S as usize, S as usize, [20 + k as u8 * 3, 40, 160]);
    let fiery = |k: u32, rows: usize| {
        // `rows` of 32 rows fire-colored, the rest near black
        let mut img = RgbImage::filled(S as usize, S as usize, [10, 10, 12]);
        for y in 0..rows {
            for x in 0..S as usize {
                img.set_pixel(x, y, [240 - k as u8, 150, 50]);
            }
        }
        img
    };
    for k in 0..10 {
        // abutting boxes covering 320 of 1024 pixels for k = 0
        let objs = if k == 0 {
            vec![object("fire", 0, 0, 32, 9), object("smoke", 0, 9, 32, 10)]
        } else {
            vec![object("fire", 2, 2, 20 + k, 20), object("smoke", 10, 10, 30, 28)]
        };
        // exactly half the pixels pass the color rule for k = 2, which is kept
        let mut img = if k == 2 { fiery(k, 16) } else { bluish(k) };
        if k % 3 == 1 {
            // faint noise keeps the SNR high but finite
            for (i, px) in img.data.iter_mut().enumerate() {
                *px = (*px as f64 + 0.6 * hash_noise(i as u64 + 1000 * k as u64)).round() as u8;
            }
        }
        push(Planted::Keep, img, objs);
    }
    for k in 0..6 {
        // overlapping boxes: summed areas cover 0.38, the union less than 0.30
        let objs = vec![object("fire", 0, 0, 14, 14), object("fire", 1 + k, 1, 15 + k, 15)];
        let img = if k < 2 { fiery(k, 24) } else { bluish(k) };
        push(Planted::Proportion, img, objs);
    }
    for k in 0..7 {
        let mut img = bluish(k);
        for (i, px) in img.data.iter_mut().enumerate() {
            *px = (*px as f64 + 40.0 * hash_noise(i as u64 + 7919 * k as u64)).clamp(0.0, 255.0).round() as u8;
        }
        push(Planted::Snr, img, vec![object("smoke", 0, 0, 32, 20)]);
    }
    for k in 0..7 {
        push(Planted::Color, fiery(k, 17 + k as usize), vec![object("fire", 0, 0, 32, 20)]);
    }
    out
}

pub fn write_filter_fixture(dir: &Path, cases: &[FilterCase]) {
    for c in cases {
        write_ppm(&c.image, &dir.join(format!("{}.ppm", c.id))).unwrap();
        write_voc_xml(&c.ann, &dir.join(format!("{}.xml", c.id))).unwrap();
    }
}

/// Writes samples as PPM + VOC XML pairs and a manifest listing them.
pub fn write_sample_set(dir: &Path, samples: &[Sample]) -> std::path::PathBuf {
    let mut list = String::new();
    for (i, s) in samples.iter().enumerate() {
        let id = format!("s{i}");
        let img = RgbImage::from_tensor(&s.image, 0).unwrap();
        write_ppm(&img, &dir.join(format!("{id}.ppm"))).unwrap();
        let ann = VocAnnotation::from_boxes(&format!("{id}.ppm"), img.width as u32, img.height as u32, &s.boxes);
        write_voc_xml(&ann, &dir.join(format!("{id}.xml"))).unwrap();
        list.push_str(&format!("{id}.ppm\n"));
    }
    let manifest = dir.join("train.txt");
    std::fs::write(&manifest, list).unwrap();
    manifest
}
