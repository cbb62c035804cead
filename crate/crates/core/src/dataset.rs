//! Dataset construction: frame subsampling, the proportion / noise / color
//! screening rules, Pascal VOC annotation files and split manifests.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Sample;
use crate::boxes::{class_id, BBox, CLASS_NAMES};
use crate::error::{invalid, Error, Result};
use crate::image::{ImageDecoder, PpmDecoder, RgbImage};

/// Keeps frames 0, k, 2k, … in order.
pub fn subsample_frames<P: Clone>(frames: &[P], keep_stride: usize) -> Result<Vec<P>> {
    if keep_stride == 0 {
        return Err(invalid("subsample_frames", "keep_stride must be >= 1"));
    }
    Ok(frames.iter().step_by(keep_stride).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocObject {
    pub name: String,
    pub xmin: u32,
    pub ymin: u32,
    pub xmax: u32,
    pub ymax: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VocAnnotation {
    pub filename: String,
    pub width: u32,
    pub height: u32,
    pub depth: u32,
    pub objects: Vec<VocObject>,
}

fn annotation_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Annotation {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

impl VocAnnotation {
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(annotation_err(path, "image size must be positive"));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if class_id(&o.name).is_none() {
                return Err(annotation_err(
                    path,
                    format!("object {i}: unknown class {:?} (expected one of {:?})", o.name, CLASS_NAMES),
                ));
            }
            if !(o.xmin < o.xmax && o.xmax <= self.width && o.ymin < o.ymax && o.ymax <= self.height) {
                return Err(annotation_err(
                    path,
                    format!(
                        "object {i} ({}): box ({}, {}, {}, {}) outside 0 <= min < max <= ({}, {})",
                        o.name, o.xmin, o.ymin, o.xmax, o.ymax, self.width, self.height
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Normalized center-size boxes.
    pub fn to_boxes(&self) -> Vec<BBox<f64>> {
        let (w, h) = (self.width as f64, self.height as f64);
        self.objects
            .iter()
            .map(|o| {
                BBox::from_corners(
                    o.xmin as f64 / w,
                    o.ymin as f64 / h,
                    o.xmax as f64 / w,
                    o.ymax as f64 / h,
                    class_id(&o.name).unwrap_or(0),
                )
            })
            .collect()
    }

    /// Rounds normalized boxes to pixel corners; boxes that collapse are dropped.
    pub fn from_boxes(filename: &str, width: u32, height: u32, boxes: &[BBox<f64>]) -> Self {
        let objects = boxes
            .iter()
            .filter_map(|b| {
                let (x1, y1, x2, y2) = b.corners();
                let px = |v: f64, lim: u32| (v * lim as f64).round().clamp(0.0, lim as f64) as u32;
                let o = VocObject {
                    name: CLASS_NAMES.get(b.class_id)?.to_string(),
                    xmin: px(x1, width),
                    ymin: px(y1, height),
                    xmax: px(x2, width),
                    ymax: px(y2, height),
                };
                (o.xmin < o.xmax && o.ymin < o.ymax).then_some(o)
            })
            .collect();
        Self {
            filename: filename.to_string(),
            width,
            height,
            depth: 3,
            objects,
        }
    }
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn parse_u32(node: roxmltree::Node, name: &str, path: &Path, ctx: &str) -> Result<u32> {
    let t = child_text(node, name).ok_or_else(|| annotation_err(path, format!("{ctx}: missing <{name}>")))?;
    // some tools write pixel coordinates as decimals
    t.parse::<u32>()
        .or_else(|_| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite() && *v >= 0.0)
                .map(|v| v.round() as u32)
                .ok_or(())
        })
        .map_err(|_| annotation_err(path, format!("{ctx}: <{name}> is not a non-negative number: {t:?}")))
}

pub fn parse_voc_xml(text: &str, path: &Path) -> Result<VocAnnotation> {
    let doc = roxmltree::Document::parse(text).map_err(|e| annotation_err(path, e.to_string()))?;
    let root = doc.root_element();
    if !root.has_tag_name("annotation") {
        return Err(annotation_err(path, format!("root element is <{}>", root.tag_name().name())));
    }
    let filename = child_text(root, "filename").unwrap_or("").to_string();
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| annotation_err(path, "missing <size>"))?;
    let width = parse_u32(size, "width", path, "size")?;
    let height = parse_u32(size, "height", path, "size")?;
    let depth = match child_text(size, "depth") {
        Some(_) => parse_u32(size, "depth", path, "size")?,
        None => 3,
    };
    let mut objects = Vec::new();
    for (i, obj) in root.children().filter(|c| c.has_tag_name("object")).enumerate() {
        let ctx = format!("object {i}");
        let name = child_text(obj, "name")
            .ok_or_else(|| annotation_err(path, format!("{ctx}: missing <name>")))?
            .to_string();
        let bb = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| annotation_err(path, format!("{ctx}: missing <bndbox>")))?;
        objects.push(VocObject {
            name,
            xmin: parse_u32(bb, "xmin", path, &ctx)?,
            ymin: parse_u32(bb, "ymin", path, &ctx)?,
            xmax: parse_u32(bb, "xmax", path, &ctx)?,
            ymax: parse_u32(bb, "ymax", path, &ctx)?,
        });
    }
    let ann = VocAnnotation {
        filename,
        width,
        height,
        depth,
        objects,
    };
    ann.validate(path)?;
    Ok(ann)
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

pub fn voc_to_xml(ann: &VocAnnotation) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "<annotation>");
    let _ = writeln!(s, "\t<filename>{}</filename>", escape(&ann.filename));
    let _ = writeln!(s, "\t<size>");
    let _ = writeln!(s, "\t\t<width>{}</width>", ann.width);
    let _ = writeln!(s, "\t\t<height>{}</height>", ann.height);
    let _ = writeln!(s, "\t\t<depth>{}</depth>", ann.depth);
    let _ = writeln!(s, "\t</size>");
    for o in &ann.objects {
        let _ = writeln!(s, "\t<object>");
        let _ = writeln!(s, "\t\t<name>{}</name>", escape(&o.name));
        let _ = writeln!(s, "\t\t<pose>Unspecified</pose>");
        let _ = writeln!(s, "\t\t<truncated>0</truncated>");
        let _ = writeln!(s, "\t\t<difficult>0</difficult>");
        let _ = writeln!(s, "\t\t<bndbox>");
        let _ = writeln!(s, "\t\t\t<xmin>{}</xmin>", o.xmin);
        let _ = writeln!(s, "\t\t\t<ymin>{}</ymin>", o.ymin);
        let _ = writeln!(s, "\t\t\t<xmax>{}</xmax>", o.xmax);
        let _ = writeln!(s, "\t\t\t<ymax>{}</ymax>", o.ymax);
        let _ = writeln!(s, "\t\t</bndbox>");
        let _ = writeln!(s, "\t</object>");
    }
    let _ = writeln!(s, "</annotation>");
    s
}

pub fn read_voc_xml(path: &Path) -> Result<VocAnnotation> {
    let text = fs::read_to_string(path)?;
    parse_voc_xml(&text, path)
}

pub fn write_voc_xml(ann: &VocAnnotation, path: &Path) -> Result<()> {
    ann.validate(path)?;
    fs::write(path, voc_to_xml(ann))?;
    Ok(())
}

/// Area of the union of all object boxes over the image area.
pub fn union_area_fraction(ann: &VocAnnotation) -> f64 {
    if ann.objects.is_empty() || ann.width == 0 || ann.height == 0 {
        return 0.0;
    }
    let mut xs: Vec<u32> = ann.objects.iter().flat_map(|o| [o.xmin, o.xmax]).collect();
    let mut ys: Vec<u32> = ann.objects.iter().flat_map(|o| [o.ymin, o.ymax]).collect();
    xs.sort_unstable();
    xs.dedup();
    ys.sort_unstable();
    ys.dedup();
    let mut area = 0u64;
    for xw in xs.windows(2) {
        for yw in ys.windows(2) {
            let covered = ann
                .objects
                .iter()
                .any(|o| o.xmin <= xw[0] && xw[1] <= o.xmax && o.ymin <= yw[0] && yw[1] <= o.ymax);
            if covered {
                area += (xw[1] - xw[0]) as u64 * (yw[1] - yw[0]) as u64;
            }
        }
    }
    area as f64 / (ann.width as f64 * ann.height as f64)
}

/// Keep when the union of boxes covers at least `min_ratio` of the image.
pub fn proportion_filter(ann: &VocAnnotation, min_ratio: f64) -> bool {
    union_area_fraction(ann) >= min_ratio
}

pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
        .collect()
}

/// Noise standard deviation from the 3×3 Laplacian-difference operator
/// `[[1,-2,1],[-2,4,-2],[1,-2,1]]` over the interior of the luminance plane.
pub fn noise_sigma(img: &RgbImage) -> Result<f64> {
    let (w, h) = (img.width, img.height);
    if w < 3 || h < 3 {
        return Err(invalid("snr_estimate", format!("image {w}x{h} is smaller than 3x3")));
    }
    let lum = luminance(img);
    const K: [[f64; 3]; 3] = [[1.0, -2.0, 1.0], [-2.0, 4.0, -2.0], [1.0, -2.0, 1.0]];
    let mut sum = 0.0;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let mut acc = 0.0;
            for (dy, row) in K.iter().enumerate() {
                for (dx, k) in row.iter().enumerate() {
                    acc += k * lum[(y + dy - 1) * w + (x + dx - 1)];
                }
            }
            sum += acc.abs();
        }
    }
    Ok((std::f64::consts::PI / 2.0).sqrt() * sum / (6.0 * (w - 2) as f64 * (h - 2) as f64))
}

/// `20·log10(rms(luminance) / σ)` in dB; `+∞` when no noise is measurable.
pub fn snr_estimate(img: &RgbImage) -> Result<f64> {
    let sigma = noise_sigma(img)?;
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let lum = luminance(img);
    let rms = (lum.iter().map(|v| v * v).sum::<f64>() / lum.len() as f64).sqrt();
    Ok(20.0 * (rms / sigma).log10())
}

/// Fraction of pixels with `R > R_avg`, `G > G_avg` and `R > G > B`.
pub fn color_rule_fraction(img: &RgbImage) -> f64 {
    let n = (img.width * img.height) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (mut rs, mut gs) = (0.0, 0.0);
    for [r, g, _] in img.pixels() {
        rs += r as f64;
        gs += g as f64;
    }
    let (r_avg, g_avg) = (rs / n, gs / n);
    let hits = img
        .pixels()
        .filter(|&[r, g, b]| r as f64 > r_avg && g as f64 > g_avg && r > g && g > b)
        .count();
    hits as f64 / n
}

pub fn color_rule_filter(img: &RgbImage, pixel_fraction_thresh: f64) -> bool {
    color_rule_fraction(img) <= pixel_fraction_thresh
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub min_ratio: f64,
    pub snr_db: f64,
    pub color_fraction: f64,
    pub use_proportion: bool,
    pub use_snr: bool,
    pub use_color: bool,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_ratio: 0.30,
            snr_db: 35.0,
            color_fraction: 0.5,
            use_proportion: true,
            use_snr: true,
            use_color: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rejection {
    Proportion(f64),
    Snr(f64),
    Color(f64),
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::Proportion(v) => write!(f, "proportion {v:.6}"),
            Rejection::Snr(v) => write!(f, "snr {v:.6}"),
            Rejection::Color(v) => write!(f, "color {v:.6}"),
        }
    }
}

/// Applies the enabled rules in order (proportion, noise, color); the first
/// failure is the reason.
pub fn screen(ann: &VocAnnotation, img: &RgbImage, cfg: &FilterConfig) -> Result<Option<Rejection>> {
    if cfg.use_proportion {
        let r = union_area_fraction(ann);
        if r < cfg.min_ratio {
            return Ok(Some(Rejection::Proportion(r)));
        }
    }
    if cfg.use_snr {
        let s = snr_estimate(img)?;
        if s <= cfg.snr_db {
            return Ok(Some(Rejection::Snr(s)));
        }
    }
    if cfg.use_color {
        let c = color_rule_fraction(img);
        if c > cfg.color_fraction {
            return Ok(Some(Rejection::Color(c)));
        }
    }
    Ok(None)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FilterReport {
    pub input: usize,
    pub rejected_proportion: usize,
    pub rejected_snr: usize,
    pub rejected_color: usize,
    pub kept: usize,
    pub reasons: Vec<(String, Option<Rejection>)>,
}

impl FilterReport {
    pub fn record(&mut self, id: impl Into<String>, outcome: Option<Rejection>) {
        self.input += 1;
        match outcome {
            None => self.kept += 1,
            Some(Rejection::Proportion(_)) => self.rejected_proportion += 1,
            Some(Rejection::Snr(_)) => self.rejected_snr += 1,
            Some(Rejection::Color(_)) => self.rejected_color += 1,
        }
        self.reasons.push((id.into(), outcome));
    }

    pub fn kept_ids(&self) -> impl Iterator<Item = &str> {
        self.reasons
            .iter()
            .filter(|(_, r)| r.is_none())
            .map(|(id, _)| id.as_str())
    }
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}", self.input)?;
        writeln!(f, "rejected_proportion {}", self.rejected_proportion)?;
        writeln!(f, "rejected_snr {}", self.rejected_snr)?;
        writeln!(f, "rejected_color {}", self.rejected_color)?;
        writeln!(f, "kept {}", self.kept)?;
        for (id, r) in &self.reasons {
            match r {
                None => writeln!(f, "{id} kept")?,
                Some(r) => writeln!(f, "{id} {r}")?,
            }
        }
        Ok(())
    }
}

/// Image files in `dir` with a `.ppm` extension, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Screens every `name.ppm` + `name.xml` pair in `input`; kept pairs are
/// copied to `output`.
pub fn filter_directory(input: &Path, output: &Path, cfg: &FilterConfig, decoder: &dyn ImageDecoder) -> Result<FilterReport> {
    fs::create_dir_all(output)?;
    let mut report = FilterReport::default();
    for img_path in list_images(input)? {
        let xml_path = img_path.with_extension("xml");
        let ann = read_voc_xml(&xml_path)?;
        let img = decoder.decode(&img_path)?;
        let outcome = screen(&ann, &img, cfg)?;
        if outcome.is_none() {
            fs::copy(&img_path, output.join(file_name(&img_path)))?;
            fs::copy(&xml_path, output.join(file_name(&xml_path)))?;
        }
        report.record(file_name(&img_path), outcome);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Seeded shuffle followed by a split by `ratios` (train, val, test), which must sum to 1.
pub fn build_manifest(items: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<Manifest> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid("build_manifest", format!("ratios {ratios:?} must be non-negative and sum to 1")));
    }
    let mut sorted = items.to_vec();
    sorted.sort();
    sorted.dedup();
    sorted.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = sorted.len();
    let n_train = (a * n as f64).round() as usize;
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    let test = sorted.split_off(n_train + n_val);
    let val = sorted.split_off(n_train);
    Ok(Manifest {
        train: sorted,
        val,
        test,
    })
}

pub fn write_list(path: &Path, items: &[String]) -> Result<()> {
    let mut s = String::new();
    for i in items {
        s.push_str(i);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// One relative path per line; blank lines and `#` comments are skipped.
pub fn read_list(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Image path and annotation path (same stem, `.xml`) of a manifest entry.
pub fn resolve_entry(manifest: &Path, entry: &str) -> (PathBuf, PathBuf) {
    let base = manifest.parent().unwrap_or(Path::new("."));
    let img = base.join(entry);
    let xml = img.with_extension("xml");
    (img, xml)
}

pub fn load_sample(img_path: &Path, xml_path: &Path, decoder: &dyn ImageDecoder) -> Result<Sample> {
    let img = decoder.decode(img_path)?;
    let ann = read_voc_xml(xml_path)?;
    if ann.width as usize != img.width || ann.height as usize != img.height {
        return Err(annotation_err(
            xml_path,
            format!(
                "annotated size {}x{} differs from image {}x{}",
                ann.width, ann.height, img.width, img.height
            ),
        ));
    }
    Sample::new(img.to_tensor(), ann.to_boxes())
}

/// Loads every manifest entry as `(image id, sample)`; the id is the file stem.
pub fn load_manifest(manifest: &Path) -> Result<Vec<(String, Sample)>> {
    let entries = read_list(manifest)?;
    if entries.is_empty() {
        return Err(invalid("load_manifest", format!("{} lists no images", manifest.display())));
    }
    entries
        .iter()
        .map(|e| {
            let (img, xml) = resolve_entry(manifest, e);
            let id = img
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| e.clone());
            Ok((id, load_sample(&img, &xml, &PpmDecoder)?))
        })
        .collect()
}
