mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use firedet::anchors::{kmeans, mean_best_iou, KmeansConfig};
use firedet::augment::{mosaic_seeded, to_rgb8, MosaicConfig, Sample};
use firedet::boxes::BBox;
use firedet::detector::{decode, spp, AnchorSet, ScaleGeom, FIELDS};
use firedet::model::{ModelConfig, Network, Preset};
use firedet::nn::{Ctx, Mode};
use firedet::params::ParamStore;
use firedet::tensor::{Shape, Tensor};
use firedet::train::Trainer;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[test]
fn spp_matches_window_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (c, h, w) = (3, 7, 9);
    let input = Tensor::uniform(Shape::new(2, c, h, w), -1.0, 1.0, &mut rng);
    let store = ParamStore::<f64>::new();
    let mut ctx = Ctx::new(&store, Mode::Eval);
    let x = ctx.graph.input(input.clone());
    let y = spp(&mut ctx, x).unwrap();
    let out = ctx.graph.value(y);
    assert_eq!(out.shape(), Shape::new(2, 4 * c, h, w));
    for n in 0..2 {
        for (branch, k) in [1usize, 5, 9, 13].into_iter().enumerate() {
            let r = (k / 2) as isize;
            for ch in 0..c {
                for i in 0..h as isize {
                    for j in 0..w as isize {
                        let mut m = f64::NEG_INFINITY;
                        for di in -r..=r {
                            for dj in -r..=r {
                                let (y, x) = (i + di, j + dj);
                                if (0..h as isize).contains(&y) && (0..w as isize).contains(&x) {
                                    m = m.max(input.at(n, ch, y as usize, x as usize));
                                }
                            }
                        }
                        assert_eq!(out.at(n, branch * c + ch, i as usize, j as usize), m);
                    }
                }
            }
        }
    }
}

#[test]
fn decode_of_constructed_raws() {
    let scale = ScaleGeom {
        grid: 2,
        anchors: vec![(8.0, 16.0), (20.0, 10.0), (30.0, 30.0)],
    };
    // everything off except anchor 1 in cell (row 1, col 0)
    let mut raw = Tensor::full(Shape::new(1, 3 * FIELDS, 2, 2), -20.0);
    let vals = [0.3, -0.4, 0.5, -0.2, 2.0, 1.0, -1.0];
    for (f, v) in vals.iter().enumerate() {
        raw.set(0, FIELDS + f, 1, 0, *v);
    }
    let dets = decode(&raw, 0, &scale, 64, 0.1).unwrap();
    let obj = sig(2.0);
    let want = [(0usize, obj * sig(1.0)), (1, obj * sig(-1.0))];
    let kept: Vec<_> = want.iter().filter(|(_, s)| *s >= 0.1).collect();
    assert_eq!(dets.len(), kept.len());
    for (d, (c, s)) in dets.iter().zip(kept) {
        assert_eq!(d.class_id, *c);
        assert!((d.score - s).abs() < 1e-15);
        assert!((d.bbox.cx - (sig(0.3) + 0.0) / 2.0).abs() < 1e-15);
        assert!((d.bbox.cy - (sig(-0.4) + 1.0) / 2.0).abs() < 1e-15);
        assert!((d.bbox.w - 20.0 * 0.5f64.exp() / 64.0).abs() < 1e-15);
        assert!((d.bbox.h - 10.0 * (-0.2f64).exp() / 64.0).abs() < 1e-15);
    }
}

fn shape_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let i = a.0.min(b.0) * a.1.min(b.1);
    i / (a.0 * a.1 + b.0 * b.1 - i)
}

/// Plain Lloyd iterations with `1 - IoU` distance from random data points.
fn reference_kmeans(shapes: &[(f64, f64)], k: usize, starts: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;
    for _ in 0..starts {
        let mut centers: Vec<(f64, f64)> = (0..k).map(|_| shapes[rng.random_range(0..shapes.len())]).collect();
        for _ in 0..200 {
            let mut sums = vec![(0.0, 0.0, 0usize); k];
            for &s in shapes {
                let j = (0..k)
                    .max_by(|&a, &b| shape_iou(s, centers[a]).partial_cmp(&shape_iou(s, centers[b])).unwrap())
                    .unwrap();
                sums[j].0 += s.0;
                sums[j].1 += s.1;
                sums[j].2 += 1;
            }
            for (c, (sw, sh, n)) in centers.iter_mut().zip(sums) {
                if n > 0 {
                    *c = (sw / n as f64, sh / n as f64);
                }
            }
        }
        let mean = shapes
            .iter()
            .map(|&s| centers.iter().map(|&c| shape_iou(s, c)).fold(0.0, f64::max))
            .sum::<f64>()
            / shapes.len() as f64;
        best = best.max(mean);
    }
    best
}

#[test]
fn kmeans_close_to_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shapes: Vec<(f64, f64)> = (0..20)
        .map(|i| {
            let base = [(10.0, 14.0), (40.0, 30.0), (90.0, 120.0)][i % 3];
            (base.0 * rng.random_range(0.7..1.3), base.1 * rng.random_range(0.7..1.3))
        })
        .collect();
    let cfg = KmeansConfig {
        k: 3,
        ..KmeansConfig::default()
    };
    let ours = kmeans(&shapes, &cfg).unwrap();
    let reference = reference_kmeans(&shapes, 3, 200, 5);
    assert!((ours.mean_iou - mean_best_iou(&shapes, &ours.centers)).abs() < 1e-12);
    assert!(ours.mean_iou >= 0.99 * reference, "{} vs {}", ours.mean_iou, reference);
    let areas: Vec<f64> = ours.centers.iter().map(|c| c.0 * c.1).collect();
    assert!(areas.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn gradient_reaches_deepest_tap_from_finest_head() {
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&mut store, ModelConfig::preset(Preset::Desk), &AnchorSet::fallback(64), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ctx = Ctx::new(&store, Mode::Train);
    let x = ctx.graph.input(Tensor::uniform(Shape::new(2, 3, 64, 64), 0.0, 1.0, &mut rng));
    let out = net.forward(&mut ctx, x).unwrap();
    // loss on the 8×8 output only
    let fine = out.raws[2];
    let n = ctx.graph.value(fine).numel();
    let total: f64 = ctx.graph.value(fine).data().iter().sum();
    let loss = ctx.graph.scalar(total, vec![fine], vec![vec![1.0; n]]).unwrap();
    let (graph, _) = ctx.into_parts();
    let grads = graph.backward(loss).unwrap().param_grads();
    let deepest: Vec<_> = grads
        .iter()
        .filter(|(id, _)| store.name(*id).starts_with("backbone.block2"))
        .collect();
    assert!(!deepest.is_empty());
    assert!(deepest.iter().any(|(_, g)| g.iter().any(|v| v.abs() > 0.0)));
}

#[test]
fn f32_forward_tracks_f64() {
    let cfg = ModelConfig::preset(Preset::Desk);
    let anchors = AnchorSet::fallback(64);
    let mut s64 = ParamStore::<f64>::new();
    let net = Network::new(&mut s64, cfg, &anchors, 9).unwrap();
    let mut s32 = ParamStore::<f32>::new();
    Network::new(&mut s32, cfg, &anchors, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let img = Tensor::<f64>::uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, &mut rng);
    let run64 = {
        let mut ctx = Ctx::new(&s64, Mode::Eval);
        let x = ctx.graph.input(img.clone());
        let o = net.forward(&mut ctx, x).unwrap();
        ctx.graph.value(o.raws[0]).clone()
    };
    let run32 = {
        let mut ctx = Ctx::new(&s32, Mode::Eval);
        let x = ctx.graph.input(img.cast::<f32>());
        let o = net.forward(&mut ctx, x).unwrap();
        ctx.graph.value(o.raws[0]).cast::<f64>()
    };
    let worst = run64
        .data()
        .iter()
        .zip(run32.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max);
    assert!(worst < 1e-3, "{worst}");
}

#[test]
fn single_image_loss_drops() {
    let sample = common::overfit_fixture().swap_remove(2);
    let mut cfg = common::overfit_config();
    cfg.train.batch_size = 1;
    cfg.train.learning_rate = 3e-3;
    let anchors = firedet::train::select_anchors(&cfg, std::slice::from_ref(&sample)).unwrap();
    let mut t = Trainer::<f64>::new(cfg, &anchors).unwrap();
    let losses: Vec<f64> = (0..50)
        .map(|_| t.step(std::slice::from_ref(&sample)).unwrap().total())
        .collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.5 * head, "{head} -> {tail}");
}

fn mosaic_inputs() -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    (0..4)
        .map(|k| {
            let (w, h) = (24 + 8 * k, 40 - 4 * k);
            let img = Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| ((x * 7 + y * 3 + c * 11 + k * 5) % 17) as f64 / 16.0);
            let boxes = vec![
                BBox::new(0.5, 0.5, 0.4, 0.3, k % 2),
                BBox::new(rng.random_range(0.3..0.7), 0.25, 0.2, 0.2, (k + 1) % 2),
            ];
            Sample::new(img, boxes).unwrap()
        })
        .collect()
}

#[test]
fn mosaic_golden_hash() {
    let mut cfg = MosaicConfig::new(48);
    cfg.seed = 2024;
    let out = mosaic_seeded(&mosaic_inputs(), &cfg).unwrap();
    let mut h = Sha256::new();
    h.update(to_rgb8(&out.image));
    for b in &out.boxes {
        for v in [b.cx, b.cy, b.w, b.h] {
            h.update(format!("{v:.9}").as_bytes());
        }
        h.update([b.class_id as u8]);
    }
    let digest: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
    assert_eq!(digest, GOLDEN);
}

const GOLDEN: &str = "ad1c373351e3a18136d03ffa5cc736a91a9d471e2918694f03ad5b3f356766b5";
