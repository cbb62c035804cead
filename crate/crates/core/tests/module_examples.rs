use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use firedet::augment::{compose, photometric, MosaicConfig, MosaicPlan, Sample, TilePlan};
use firedet::boxes::BBox;
use firedet::dataset::{color_rule_fraction, noise_sigma, parse_voc_xml, snr_estimate, VocObject};
use firedet::detector::{AnchorSet, Geometry};
use firedet::image::RgbImage;
use firedet::loss::{assign_targets, SlotState};
use firedet::model::{ModelConfig, Network, Preset};
use firedet::nn::{Ctx, Mode};
use firedet::params::ParamStore;
use firedet::tensor::{Shape, Tensor};

/// HSV adjustment written with the `k = (n + 6h) mod 6` channel formula.
fn oracle_pixel(rgb: [f64; 3], brightness: f64, sat: f64, hue: f64) -> [f64; 3] {
    let [r, g, b] = rgb;
    let v = r.max(g).max(b);
    let c = v - r.min(g).min(b);
    let h6 = if c == 0.0 {
        0.0
    } else if v == r {
        (g - b) / c
    } else if v == g {
        2.0 + (b - r) / c
    } else {
        4.0 + (r - g) / c
    };
    let s = if v == 0.0 { 0.0 } else { c / v };
    let h = (h6 / 6.0 + hue).rem_euclid(1.0);
    let s = (s * sat).clamp(0.0, 1.0);
    let f = |n: f64| {
        let k = (n + 6.0 * h) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)].map(|x| (x + brightness).clamp(0.0, 1.0))
}

#[test]
fn photometric_matches_hsv_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let img = Tensor::uniform(Shape::new(1, 3, 5, 7), 0.0, 1.0, &mut rng);
    let s = Sample::new(img, vec![BBox::new(0.5, 0.5, 0.2, 0.2, 0)]).unwrap();
    for (b, sat, hue) in [(0.1, 1.3, 0.05), (-0.2, 0.6, -0.3), (0.0, 1.0, 0.5), (0.05, 2.0, 0.9)] {
        let out = photometric(&s, b, sat, hue);
        assert_eq!(out.boxes, s.boxes);
        for y in 0..5 {
            for x in 0..7 {
                let px = [0, 1, 2].map(|c| s.image.at(0, c, y, x));
                let want = oracle_pixel(px, b, sat, hue);
                for (c, w) in want.iter().enumerate() {
                    assert!((out.image.at(0, c, y, x) - w).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn mosaic_identical_inputs_center_split() {
    let img = Tensor::from_fn(Shape::new(1, 3, 20, 20), |_, c, _, _| [0.2, 0.5, 0.8][c]);
    let s = Sample::new(img, vec![BBox::new(0.5, 0.5, 0.5, 0.5, 1)]).unwrap();
    let four = vec![s.clone(), s.clone(), s.clone(), s];
    let cfg = MosaicConfig::new(32);
    let plan = MosaicPlan {
        split: (16, 16),
        tiles: [TilePlan::IDENTITY; 4],
    };
    let out = compose(&four, &plan, &cfg).unwrap();
    assert_eq!(out.sample.boxes.len(), 4);
    assert_eq!(out.source_quadrant, vec![0, 1, 2, 3]);
    for (b, (qx, qy)) in out.sample.boxes.iter().zip([(0.0, 0.0), (0.5, 0.0), (0.0, 0.5), (0.5, 0.5)]) {
        let (x1, y1, x2, y2) = b.corners();
        assert!(x1 >= qx && x2 <= qx + 0.5 && y1 >= qy && y2 <= qy + 0.5);
        assert!((b.cx - (qx + 0.25)).abs() < 1e-12 && (b.w - 0.25).abs() < 1e-12);
        assert_eq!(b.class_id, 1);
    }
}

#[test]
fn mosaic_drops_box_in_cropped_region() {
    // a 32×16 source fills a 16×16 quadrant at scale 1; its right half is cropped away
    let wide = Sample::new(
        Tensor::full(Shape::new(1, 3, 16, 32), 0.5),
        vec![BBox::new(0.85, 0.5, 0.1, 0.5, 0), BBox::new(0.2, 0.5, 0.2, 0.5, 1)],
    )
    .unwrap();
    let plain = Sample::new(Tensor::full(Shape::new(1, 3, 16, 16), 0.1), vec![]).unwrap();
    let four = vec![wide, plain.clone(), plain.clone(), plain];
    let plan = MosaicPlan {
        split: (16, 16),
        tiles: [TilePlan::IDENTITY; 4],
    };
    let out = compose(&four, &plan, &MosaicConfig::new(32)).unwrap();
    assert_eq!(out.sample.boxes.len(), 1);
    assert_eq!(out.sample.boxes[0].class_id, 1);
}

#[test]
fn noise_estimate_recovers_planted_sigma() {
    // smooth gradient plus seeded Gaussian noise on a gray image
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let normal = rand_normal();
    for sigma in [3.0, 8.0, 15.0] {
        let mut img = RgbImage::new(96, 96);
        for y in 0..96 {
            for x in 0..96 {
                let base = 60.0 + x as f64 + 0.5 * y as f64;
                let v = (base + sigma * normal(&mut rng)).round().clamp(0.0, 255.0) as u8;
                img.set_pixel(x, y, [v, v, v]);
            }
        }
        let est = noise_sigma(&img).unwrap();
        assert!((est - sigma).abs() < 0.2 * sigma, "planted {sigma}, estimated {est}");
    }
}

/// Box-Muller standard normal draws.
fn rand_normal() -> impl Fn(&mut ChaCha8Rng) -> f64 {
    |rng| {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

#[test]
fn uniform_noise_snr_golden() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut img = RgbImage::new(64, 64);
    for y in 0..64 {
        for x in 0..64 {
            img.set_pixel(x, y, [rng.random(), rng.random(), rng.random()]);
        }
    }
    let snr = snr_estimate(&img).unwrap();
    assert!(snr <= 35.0);
    assert!((snr - SNR_GOLDEN).abs() < 1e-9, "{snr}");
}

const SNR_GOLDEN: f64 = 9.030700854147682;

#[test]
fn color_fraction_half_red_half_gray() {
    let mut img = RgbImage::filled(10, 8, [128, 128, 128]);
    for y in 0..8 {
        for x in 0..5 {
            img.set_pixel(x, y, [230, 140, 40]);
        }
    }
    // per-pixel scan with the averages computed separately
    let px: Vec<[u8; 3]> = img.pixels().collect();
    let n = px.len() as f64;
    let r_avg = px.iter().map(|p| p[0] as f64).sum::<f64>() / n;
    let g_avg = px.iter().map(|p| p[1] as f64).sum::<f64>() / n;
    let hits = px
        .iter()
        .filter(|p| p[0] as f64 > r_avg && p[1] as f64 > g_avg && p[0] > p[1] && p[1] > p[2])
        .count();
    assert_eq!(hits, 40);
    assert_eq!(color_rule_fraction(&img), hits as f64 / n);
}

#[test]
fn minimal_voc_file() {
    let text = r#"<annotation>
	<folder>VOC2007</folder>
	<filename>000005.jpg</filename>
	<source><database>The VOC2007 Database</database></source>
	<size>
		<width>500</width>
		<height>375</height>
		<depth>3</depth>
	</size>
	<segmented>0</segmented>
	<object>
		<name>smoke</name>
		<pose>Unspecified</pose>
		<truncated>1</truncated>
		<difficult>0</difficult>
		<bndbox>
			<xmin>263</xmin>
			<ymin>211</ymin>
			<xmax>324</xmax>
			<ymax>339</ymax>
		</bndbox>
	</object>
	<object>
		<name>fire</name>
		<bndbox><xmin>5</xmin><ymin>244</ymin><xmax>67</xmax><ymax>374</ymax></bndbox>
	</object>
</annotation>"#;
    let a = parse_voc_xml(text, Path::new("000005.xml")).unwrap();
    assert_eq!(a.filename, "000005.jpg");
    assert_eq!((a.width, a.height, a.depth), (500, 375, 3));
    assert_eq!(
        a.objects,
        vec![
            VocObject {
                name: "smoke".into(),
                xmin: 263,
                ymin: 211,
                xmax: 324,
                ymax: 339
            },
            VocObject {
                name: "fire".into(),
                xmin: 5,
                ymin: 244,
                xmax: 67,
                ymax: 374
            },
        ]
    );
}

#[test]
fn two_gts_in_different_cells_get_disjoint_slots() {
    let anchors = AnchorSet::fallback(64);
    let geom = Geometry::three_scale(64, &anchors);
    let gts: [BBox<f64>; 2] = [BBox::new(0.2, 0.3, 0.3, 0.4, 0), BBox::new(0.8, 0.7, 0.1, 0.15, 1)];
    let asg = assign_targets(&gts, &geom, 0.5).unwrap();
    let obj = asg.obj_slots();
    assert_eq!(obj.len(), 2);
    assert_ne!(obj[0].0, obj[1].0);
    // brute force: best shape-IoU anchor over all nine, cell containing the center
    for (gi, g) in gts.iter().enumerate() {
        let mut best = (f64::NEG_INFINITY, 0, 0);
        for (si, sc) in geom.scales.iter().enumerate() {
            for (ai, &(aw, ah)) in sc.anchors.iter().enumerate() {
                let (w, h) = (g.w * 64.0, g.h * 64.0);
                let i = w.min(aw) * h.min(ah);
                let v = i / (w * h + aw * ah - i);
                if v > best.0 {
                    best = (v, si, ai);
                }
            }
        }
        let (slot, _) = obj.iter().find(|(_, k)| *k == gi).unwrap();
        let k = geom.scales[best.1].grid as f64;
        assert_eq!((slot.scale, slot.anchor), (best.1, best.2));
        assert_eq!((slot.row, slot.col), ((g.cy * k) as usize, (g.cx * k) as usize));
        assert_eq!(asg.state(*slot), SlotState::Obj(gi));
    }
}

#[test]
fn spp_only_on_deepest_branch() {
    let cfg = ModelConfig::preset(Preset::Desk);
    let mut store = ParamStore::<f64>::new();
    let _ = Network::new(&mut store, cfg, &AnchorSet::fallback(64), 0).unwrap();
    let taps = cfg.backbone.tap_channels();
    let first_conv = |branch: &str| {
        let (_, p) = store
            .iter()
            .find(|(_, p)| p.name.starts_with(&format!("head.{branch}.")) && p.name.ends_with(".weight"))
            .unwrap();
        p.tensor.shape().c
    };
    let half = cfg.head_width / 2;
    // input widths: 4× the deepest tap after pooling, plain concatenations elsewhere
    assert_eq!(first_conv("small"), 4 * taps[2]);
    assert_eq!(first_conv("mid"), half + taps[1]);
    assert_eq!(first_conv("large"), half + taps[0]);
}

#[test]
fn finest_head_gradient_into_deepest_tap_matches_fd() {
    let cfg = ModelConfig::preset(Preset::Desk);
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&mut store, cfg, &AnchorSet::fallback(64), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = Tensor::uniform(Shape::new(1, 3, 64, 64), 0.0, 1.0, &mut rng);
    // a weighted sum keeps the objective smooth and non-trivial
    let weights = Tensor::<f64>::uniform(Shape::new(1, 21, 8, 8), -1.0, 1.0, &mut rng);
    let objective = |store: &ParamStore<f64>| -> (f64, Option<Vec<f64>>, firedet::params::ParamId) {
        let id = store.find("backbone.block2.layer0.conv.weight").unwrap();
        let mut ctx = Ctx::new(store, Mode::Eval);
        let x = ctx.graph.input(img.clone());
        let out = net.forward(&mut ctx, x).unwrap();
        let fine = out.raws[2];
        let v: f64 = ctx.graph.value(fine).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        let loss = ctx.graph.scalar(v, vec![fine], vec![weights.data().to_vec()]).unwrap();
        let (graph, _) = ctx.into_parts();
        let g = graph
            .backward(loss)
            .unwrap()
            .param_grads()
            .into_iter()
            .find(|(pid, _)| *pid == id)
            .map(|(_, g)| g);
        (v, g, id)
    };
    let (_, grad, id) = objective(&store);
    let grad = grad.expect("deepest tap receives a gradient");
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..grad.len()).step_by(grad.len() / 7 + 1) {
        let mut plus = store.clone();
        plus.get_mut(id).data_mut()[i] += h;
        let mut minus = store.clone();
        minus.get_mut(id).data_mut()[i] -= h;
        let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        assert!(rel < 1e-4, "element {i}: analytic {} vs fd {fd}", grad[i]);
        checked += 1;
    }
    assert!(checked >= 5);
    assert!(grad.iter().any(|g| g.abs() > 1e-8));
}
