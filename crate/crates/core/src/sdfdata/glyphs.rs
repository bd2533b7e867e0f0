use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grayscale raster, row-major, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Mismatch {
                what: "image pixel count",
                expected: height * width,
                got: data.len(),
            });
        }
        Ok(Image { height, width, data })
    }

    pub fn blank(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    /// Bilinear value at continuous pixel coordinates; zero outside the raster.
    pub fn sample(&self, r: f64, c: f64) -> f64 {
        let (r0, c0) = (r.floor(), c.floor());
        let (fr, fc) = (r - r0, c - c0);
        let px = |rr: f64, cc: f64| {
            if rr < 0.0 || cc < 0.0 || rr >= self.height as f64 || cc >= self.width as f64 {
                0.0
            } else {
                self.get(rr as usize, cc as usize)
            }
        };
        let mut v = (1.0 - fr) * (1.0 - fc) * px(r0, c0);
        if fc > 0.0 {
            v += (1.0 - fr) * fc * px(r0, c0 + 1.0);
        }
        if fr > 0.0 {
            v += fr * (1.0 - fc) * px(r0 + 1.0, c0);
            if fc > 0.0 {
                v += fr * fc * px(r0 + 1.0, c0 + 1.0);
            }
        }
        v
    }

    /// Pixel center in normalized `(x, y)` coordinates.
    fn to_world(&self, r: usize, c: usize) -> (f64, f64) {
        let s = 2.0 / self.height.max(self.width) as f64;
        (
            (c as f64 + 0.5 - self.width as f64 / 2.0) * s,
            (r as f64 + 0.5 - self.height as f64 / 2.0) * s,
        )
    }

    /// Continuous pixel coordinates `(r, c)` of a normalized point.
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        let s = 2.0 / self.height.max(self.width) as f64;
        (
            y / s + self.height as f64 / 2.0 - 0.5,
            x / s + self.width as f64 / 2.0 - 0.5,
        )
    }

    fn from_fn(height: usize, width: usize, f: impl Fn(f64, f64) -> f64) -> Image {
        let mut img = Image::blank(height, width);
        for r in 0..height {
            for c in 0..width {
                let (x, y) = img.to_world(r, c);
                img.data[r * width + c] = f(x, y).clamp(0.0, 1.0);
            }
        }
        img
    }
}

/// Rotate by `angle` radians about the image center (bilinear resampling).
pub fn rotate(image: &Image, angle: f64) -> Image {
    let (s, c) = angle.sin_cos();
    let (hc, wc) = (image.height as f64 / 2.0, image.width as f64 / 2.0);
    let mut out = Image::blank(image.height, image.width);
    for r in 0..image.height {
        for col in 0..image.width {
            let (x, y) = (col as f64 + 0.5 - wc, r as f64 + 0.5 - hc);
            // Inverse rotation finds the source location.
            let sx = c * x + s * y;
            let sy = -s * x + c * y;
            out.data[r * image.width + col] = image.sample(sy + hc - 0.5, sx + wc - 0.5);
        }
    }
    out
}

/// A glyph pasted at `center` (normalized coordinates) and shrunk by `scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub glyph: Image,
    pub scale: f64,
    pub center: [f64; 2],
}

/// Paste glyphs onto `canvas`; overlapping ink combines by maximum.
pub fn compose(canvas: &Image, placements: &[Placement]) -> Result<Image> {
    for p in placements {
        let reach = p.center[0].abs().max(p.center[1].abs()) + p.scale;
        if !(p.scale > 0.0) || reach > 1.0 + 1e-9 {
            return Err(Error::Config(format!(
                "placement at {:?} with scale {} leaves the canvas",
                p.center, p.scale
            )));
        }
    }
    let mut out = canvas.clone();
    for r in 0..out.height {
        for c in 0..out.width {
            let (x, y) = out.to_world(r, c);
            for p in placements {
                let (gx, gy) = ((x - p.center[0]) / p.scale, (y - p.center[1]) / p.scale);
                let (gr, gc) = p.glyph.to_pixel(gx, gy);
                let v = p.glyph.sample(gr, gc);
                let slot = &mut out.data[r * out.width + c];
                *slot = slot.max(v);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ShapeOp {
    Rotate { angle: f64 },
    Compose { placements: Vec<Placement> },
}

/// Apply a raster-space transformation ahead of distance extraction.
pub fn transform_shape(image: &Image, op: &ShapeOp) -> Result<Image> {
    match op {
        ShapeOp::Rotate { angle } => Ok(rotate(image, *angle)),
        ShapeOp::Compose { placements } => compose(image, placements),
    }
}

// Seven-segment strokes over six junctions:
// 0 top-left, 1 top-right, 2 mid-left, 3 mid-right, 4 bottom-left, 5 bottom-right.
const SEGMENTS: [(usize, usize); 7] = [(0, 1), (1, 3), (3, 5), (4, 5), (2, 4), (0, 2), (2, 3)];
const DIGITS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 2, 3],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 2, 3, 5, 6],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Digit-like stroke glyph of class `digit` (0–9) with random style jitter.
pub fn render_digit(digit: usize, resolution: usize, rng: &mut impl Rng) -> Result<Image> {
    let strokes = DIGITS
        .get(digit)
        .ok_or_else(|| Error::Config(format!("digit class {digit} outside 0..=9")))?;
    let half_w = rng.gen_range(0.22..0.32);
    let half_h = rng.gen_range(0.50..0.62);
    let slant = rng.gen_range(-0.25..0.25);
    let angle: f64 = rng.gen_range(-0.15..0.15);
    let offset = (rng.gen_range(-0.08..0.08), rng.gen_range(-0.08..0.08));
    let width = rng.gen_range(0.07..0.11);
    let (sa, ca) = angle.sin_cos();
    let junctions: Vec<(f64, f64)> = (0..6)
        .map(|j| {
            let u = if j % 2 == 0 { -half_w } else { half_w };
            let v = [-half_h, 0.0, half_h][j / 2] + rng.gen_range(-0.04..0.04);
            let u = u + slant * -v + rng.gen_range(-0.04..0.04);
            (ca * u - sa * v + offset.0, sa * u + ca * v + offset.1)
        })
        .collect();
    let pixel = 2.0 / resolution as f64;
    Ok(Image::from_fn(resolution, resolution, |x, y| {
        let d = strokes
            .iter()
            .map(|&s| {
                let (a, b) = SEGMENTS[s];
                segment_distance((x, y), junctions[a], junctions[b])
            })
            .fold(f64::INFINITY, f64::min);
        0.5 + (width - d) / pixel
    }))
}

/// Star-shaped blob whose class sets the number of lobes (`class + 2`).
pub fn render_blob(class: usize, resolution: usize, rng: &mut impl Rng) -> Image {
    let lobes = (class + 2) as f64;
    let base = rng.gen_range(0.45..0.6);
    let amp = rng.gen_range(0.15..0.25);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let extra: Vec<(f64, f64, f64)> = (1..4)
        .map(|k| (k as f64, rng.gen_range(0.0..0.05), rng.gen_range(0.0..std::f64::consts::TAU)))
        .collect();
    let offset = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let pixel = 2.0 / resolution as f64;
    Image::from_fn(resolution, resolution, |x, y| {
        let (dx, dy) = (x - offset.0, y - offset.1);
        let rho = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx);
        let mut r = 1.0 + amp * (lobes * theta + phase).cos();
        for &(k, a, p) in &extra {
            r += a * (k * theta + p).cos();
        }
        0.5 + (base * r - rho) / pixel
    })
}
