//! 8-bit RGB images and binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// 1×3×H×W tensor with values in [0, 1].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let inv = T::lit(1.0 / 255.0);
        Tensor::from_fn(Shape::new(1, 3, self.height, self.width), |_, c, y, x| {
            T::lit(self.data[3 * (y * self.width + x) + c] as f64) * inv
        })
    }

    /// Inverse of [`RgbImage::to_tensor`] for batch item `n`; values are clamped and rounded.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, n: usize) -> Result<Self> {
        let s = t.shape();
        if s.c != 3 || n >= s.n {
            return Err(Error::ShapeMismatch {
                op: "image_from_tensor",
                lhs: s,
                rhs: Shape::new(n + 1, 3, s.h, s.w),
            });
        }
        let mut img = Self::new(s.w, s.h);
        for y in 0..s.h {
            for x in 0..s.w {
                for c in 0..3 {
                    let v = t.at(n, c, y, x).to_f64_lossy().clamp(0.0, 1.0);
                    img.data[3 * (y * s.w + x) + c] = (v * 255.0).round() as u8;
                }
            }
        }
        Ok(img)
    }
}

/// One-pixel rectangle outline between inclusive pixel corners, clipped to the image.
pub fn draw_rect(img: &mut RgbImage, x1: i64, y1: i64, x2: i64, y2: i64, rgb: [u8; 3]) {
    let (w, h) = (img.width as i64, img.height as i64);
    let mut put = |x: i64, y: i64| {
        if (0..w).contains(&x) && (0..h).contains(&y) {
            img.set_pixel(x as usize, y as usize, rgb);
        }
    };
    for x in x1..=x2 {
        put(x, y1);
        put(x, y2);
    }
    for y in y1..=y2 {
        put(x1, y);
        put(x2, y);
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Parses a binary PPM with maxval 255. Comments in the header are skipped.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err(path, "non-ASCII header"))?);
    }
    if fields[0] != "P6" {
        return Err(format_err(path, format!("expected P6 magic, found {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| {
        s.parse::<usize>()
            .map_err(|_| format_err(path, format!("bad {what} {s:?}")))
    };
    let width = num(fields[1], "width")?;
    let height = num(fields[2], "height")?;
    let maxval = num(fields[3], "maxval")?;
    if maxval != 255 {
        return Err(format_err(path, format!("only maxval 255 is supported, found {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(format_err(path, "empty image"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(format_err(
            path,
            format!("raster has {} bytes, expected {need}", bytes.len().saturating_sub(pos)),
        ));
    }
    Ok(RgbImage {
        width,
        height,
        data: bytes[pos..pos + need].to_vec(),
    })
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    decode_ppm(&fs::read(path)?, path)
}

pub fn write_ppm(img: &RgbImage, path: &Path) -> Result<()> {
    fs::write(path, encode_ppm(img))?;
    Ok(())
}

/// Pluggable image decoder; the filters and loaders only see [`RgbImage`].
pub trait ImageDecoder {
    fn decode(&self, path: &Path) -> Result<RgbImage>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpmDecoder;

impl ImageDecoder for PpmDecoder {
    fn decode(&self, path: &Path) -> Result<RgbImage> {
        read_ppm(path)
    }
}
