//! Procedural datasets that need no downloads.
//!
//! The glyph families mimic natural photos in one respect that matters
//! for rotation pretext tasks: every image has a canonical "up". Shapes
//! are drawn upright (with a little jitter) over a background that is lit
//! from the top, and several class pairs differ only by a global rotation.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::image::{ImageTensor, MIN_SIDE};
use crate::rng;

/// A built-in generator and its size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SyntheticSpec {
    /// Two classes: one Gaussian blob in the top or the bottom half.
    TwoGaussianBlobs {
        count: usize,
        #[serde(default = "default_blob_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Upright glyphs on top-lit backgrounds (10 classes).
    Glyphs {
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        style: GlyphStyle,
    },
    /// Six glyph shapes absent from [`SyntheticSpec::Glyphs`], same style.
    HeldOutGlyphs {
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        style: GlyphStyle,
    },
    /// Striped backgrounds; the class is a small pattern at a random spot.
    StripedPatches {
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Striped and noisy backgrounds without any object (one class).
    Textures {
        count: usize,
        #[serde(default = "default_size")]
        size: usize,
        #[serde(default)]
        seed: u64,
    },
}

fn default_blob_size() -> usize {
    16
}
fn default_size() -> usize {
    32
}

/// Nuisance settings of the glyph renderer.
///
/// With the defaults an image shows four upright copies of its class
/// motif, one per quadrant. A rotated patch of at most half the image side
/// corrupts at most a part of the evidence; a whole-image rotation turns
/// every copy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GlyphStyle {
    /// Motif half-extent as a fraction of the image side.
    pub min_scale: f64,
    pub max_scale: f64,
    /// Maximum offset of each copy from its anchor, as a fraction of the
    /// image side.
    pub jitter: f64,
    /// Maximum in-plane tilt in degrees.
    pub tilt_degrees: f64,
    /// Standard deviation of additive pixel noise.
    pub noise: f64,
    /// Number of random rectangles drawn as clutter.
    pub clutter: usize,
    /// Copies of the motif: 1 draws one centered copy, 2 to 4 fill that
    /// many randomly chosen quadrants.
    #[serde(default = "default_copies")]
    pub copies: usize,
}

fn default_copies() -> usize {
    4
}

impl Default for GlyphStyle {
    fn default() -> Self {
        Self {
            min_scale: 0.18,
            max_scale: 0.24,
            jitter: 0.04,
            tilt_degrees: 12.0,
            noise: 0.06,
            clutter: 2,
            copies: 4,
        }
    }
}

impl SyntheticSpec {
    pub fn name(&self) -> &'static str {
        match self {
            SyntheticSpec::TwoGaussianBlobs { .. } => "two-gaussian-blobs",
            SyntheticSpec::Glyphs { .. } => "glyphs",
            SyntheticSpec::HeldOutGlyphs { .. } => "held-out-glyphs",
            SyntheticSpec::StripedPatches { .. } => "striped-patches",
            SyntheticSpec::Textures { .. } => "textures",
        }
    }

    pub fn class_names(&self) -> Vec<String> {
        let names: &[&str] = match self {
            SyntheticSpec::TwoGaussianBlobs { .. } => &["top", "bottom"],
            SyntheticSpec::Glyphs { .. } => &GLYPH_NAMES,
            SyntheticSpec::HeldOutGlyphs { .. } => &HELD_OUT_NAMES,
            SyntheticSpec::StripedPatches { .. } => &PATCH_NAMES,
            SyntheticSpec::Textures { .. } => &["texture"],
        };
        names.iter().map(|s| s.to_string()).collect()
    }

    fn dims(&self) -> (usize, usize, u64) {
        match *self {
            SyntheticSpec::TwoGaussianBlobs { count, size, seed }
            | SyntheticSpec::Glyphs { count, size, seed, .. }
            | SyntheticSpec::HeldOutGlyphs { count, size, seed, .. }
            | SyntheticSpec::StripedPatches { count, size, seed }
            | SyntheticSpec::Textures { count, size, seed } => (count, size, seed),
        }
    }

    /// Generate one split. Sample `i` has label `i mod K` and is drawn from
    /// its own stream, so prefixes of larger sets coincide.
    pub fn generate(&self, split: Split) -> Result<LabeledDataset> {
        let (count, size, seed) = self.dims();
        if size < MIN_SIDE {
            return Err(Error::config("size", format!("must be at least {MIN_SIDE}")));
        }
        let names = self.class_names();
        let k = names.len();
        let samples = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, &[rng::tag::DATA, split.key(), i as u64]);
                let y = i % k;
                let img = match self {
                    SyntheticSpec::TwoGaussianBlobs { .. } => blob(size, y, &mut r),
                    SyntheticSpec::Glyphs { style, .. } => render_glyph(size, &glyph(y), style, &mut r),
                    SyntheticSpec::HeldOutGlyphs { style, .. } => render_glyph(size, &held_out(y), style, &mut r),
                    SyntheticSpec::StripedPatches { .. } => striped_patch(size, y, &mut r),
                    SyntheticSpec::Textures { .. } => texture(size, &mut r),
                };
                (img, y)
            })
            .collect();
        LabeledDataset::new(self.name(), split, names, samples)
    }
}

const GLYPH_NAMES: [&str; 10] = [
    "tee",
    "inverted-tee",
    "ell",
    "turned-ell",
    "triangle-up",
    "triangle-right",
    "plus",
    "ring",
    "horizontal-bars",
    "vertical-bars",
];

const HELD_OUT_NAMES: [&str; 6] = ["cross", "aitch", "square-outline", "zed", "disk", "chevron"];

const PATCH_NAMES: [&str; 5] = ["dot", "horizontal-dash", "vertical-dash", "slash", "backslash"];

/// Convex regions in glyph coordinates `[-1, 1]^2`, y pointing down.
#[derive(Debug, Clone)]
enum Prim {
    Poly(Vec<(f64, f64)>),
    Annulus { inner: f64, outer: f64 },
    Disk { r: f64 },
}

fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Prim {
    Prim::Poly(vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)])
}

/// A thick segment from `a` to `b`.
fn bar(a: (f64, f64), b: (f64, f64), half_width: f64) -> Prim {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = (dx * dx + dy * dy).sqrt();
    let (nx, ny) = (-dy / len * half_width, dx / len * half_width);
    Prim::Poly(vec![
        (a.0 + nx, a.1 + ny),
        (b.0 + nx, b.1 + ny),
        (b.0 - nx, b.1 - ny),
        (a.0 - nx, a.1 - ny),
    ])
}

impl Prim {
    fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Prim::Poly(pts) => {
                let mut sign = 0.0;
                for i in 0..pts.len() {
                    let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                    let cross = (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                    if cross != 0.0 {
                        if sign == 0.0 {
                            sign = cross.signum();
                        } else if cross.signum() != sign {
                            return false;
                        }
                    }
                }
                true
            }
            Prim::Annulus { inner, outer } => {
                let r = (x * x + y * y).sqrt();
                r >= *inner && r <= *outer
            }
            Prim::Disk { r } => x * x + y * y <= r * r,
        }
    }
}

fn glyph(class: usize) -> Vec<Prim> {
    match class {
        0 => vec![rect(-0.8, -0.8, 0.8, -0.4), rect(-0.2, -0.4, 0.2, 0.8)],
        1 => vec![rect(-0.8, 0.4, 0.8, 0.8), rect(-0.2, -0.8, 0.2, 0.4)],
        2 => vec![rect(-0.6, -0.8, -0.2, 0.8), rect(-0.2, 0.4, 0.7, 0.8)],
        3 => vec![rect(0.2, -0.8, 0.6, 0.8), rect(-0.7, -0.8, 0.2, -0.4)],
        4 => vec![Prim::Poly(vec![(0.0, -0.8), (0.8, 0.7), (-0.8, 0.7)])],
        5 => vec![Prim::Poly(vec![(0.8, 0.0), (-0.7, 0.8), (-0.7, -0.8)])],
        6 => vec![rect(-0.8, -0.2, 0.8, 0.2), rect(-0.2, -0.8, 0.2, 0.8)],
        7 => vec![Prim::Annulus {
            inner: 0.45,
            outer: 0.8,
        }],
        8 => vec![rect(-0.8, -0.6, 0.8, -0.2), rect(-0.8, 0.2, 0.8, 0.6)],
        _ => vec![rect(-0.6, -0.8, -0.2, 0.8), rect(0.2, -0.8, 0.6, 0.8)],
    }
}

fn held_out(class: usize) -> Vec<Prim> {
    match class {
        0 => vec![bar((-0.7, -0.7), (0.7, 0.7), 0.18), bar((-0.7, 0.7), (0.7, -0.7), 0.18)],
        1 => vec![
            rect(-0.7, -0.8, -0.35, 0.8),
            rect(0.35, -0.8, 0.7, 0.8),
            rect(-0.35, -0.18, 0.35, 0.18),
        ],
        2 => vec![
            rect(-0.8, -0.8, 0.8, -0.5),
            rect(-0.8, 0.5, 0.8, 0.8),
            rect(-0.8, -0.5, -0.5, 0.5),
            rect(0.5, -0.5, 0.8, 0.5),
        ],
        3 => vec![
            rect(-0.7, -0.8, 0.7, -0.5),
            rect(-0.7, 0.5, 0.7, 0.8),
            bar((0.6, -0.5), (-0.6, 0.5), 0.17),
        ],
        4 => vec![Prim::Disk { r: 0.7 }],
        _ => vec![bar((0.6, -0.7), (-0.5, 0.0), 0.18), bar((-0.5, 0.0), (0.6, 0.7), 0.18)],
    }
}

fn random_color<R: Rng + ?Sized>(r: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    let base = r.gen_range(lo..hi);
    [0, 1, 2].map(|_| (base + r.gen_range(-0.15..0.15)).clamp(0.0, 1.0))
}

/// Vertical light gradient (bright sky, dark ground) plus faint stripes.
fn background<R: Rng + ?Sized>(size: usize, r: &mut R) -> Vec<[f64; 3]> {
    let top = random_color(r, 0.6, 0.9);
    let bottom = random_color(r, 0.1, 0.35);
    let theta = r.gen_range(0.0..PI);
    let freq = r.gen_range(0.3..1.2);
    let phase = r.gen_range(0.0..2.0 * PI);
    let amp = r.gen_range(0.0..0.06);
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let t = (y as f64 + 0.5) / s;
        for x in 0..size {
            let stripe = amp * (freq * (x as f64 * theta.cos() + y as f64 * theta.sin()) + phase).sin();
            out.push([0, 1, 2].map(|c| top[c] * (1.0 - t) + bottom[c] * t + stripe));
        }
    }
    out
}

fn finish<R: Rng + ?Sized>(size: usize, pixels: Vec<[f64; 3]>, noise: f64, r: &mut R) -> ImageTensor {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite std");
    let mut data = Vec::with_capacity(size * size * 3);
    for px in pixels {
        for v in px {
            let n = if noise > 0.0 { normal.sample(r) } else { 0.0 };
            data.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    ImageTensor::new(size, size, 3, data).expect("valid synthetic image")
}

/// Paint the union of `prims` under a similarity transform with 2x2
/// supersampled coverage.
fn paint(pixels: &mut [[f64; 3]], size: usize, prims: &[Prim], center: (f64, f64), scale: f64, angle: f64, color: [f64; 3]) {
    let (sin, cos) = angle.sin_cos();
    for y in 0..size {
        for x in 0..size {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let (dx, dy) = ((x as f64 + ox - center.0) / scale, (y as f64 + oy - center.1) / scale);
                let (gx, gy) = (cos * dx + sin * dy, -sin * dx + cos * dy);
                if prims.iter().any(|p| p.contains(gx, gy)) {
                    hits += 1;
                }
            }
            if hits > 0 {
                let a = hits as f64 / 4.0;
                let px = &mut pixels[y * size + x];
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

fn render_glyph<R: Rng + ?Sized>(size: usize, prims: &[Prim], style: &GlyphStyle, r: &mut R) -> ImageTensor {
    let s = size as f64;
    let mut pixels = background(size, r);
    for _ in 0..style.clutter {
        let w = r.gen_range(0.05..0.2);
        let h = r.gen_range(0.05..0.2);
        let cx = r.gen_range(-1.0..1.0);
        let cy = r.gen_range(-1.0..1.0);
        let clutter = [rect(cx - w, cy - h, cx + w, cy + h)];
        let color = random_color(r, 0.0, 1.0);
        paint(&mut pixels, size, &clutter, (s / 2.0, s / 2.0), s / 2.0, 0.0, color);
    }
    let scale = s * r.gen_range(style.min_scale..=style.max_scale.max(style.min_scale));
    let mut anchors = vec![(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
    anchors.shuffle(r);
    anchors.truncate(style.copies.clamp(1, 4));
    if style.copies <= 1 {
        anchors = vec![(0.5, 0.5)];
    }
    // Dark on the bright top half or bright on the dark bottom half, with
    // random hue; all copies share one colour.
    let color = if r.gen_bool(0.5) {
        random_color(r, 0.0, 0.3)
    } else {
        random_color(r, 0.65, 1.0)
    };
    let j = style.jitter * s;
    let tilt = style.tilt_degrees.abs().to_radians();
    for (ax, ay) in anchors {
        let center = (
            ax * s + if j > 0.0 { r.gen_range(-j..=j) } else { 0.0 },
            ay * s + if j > 0.0 { r.gen_range(-j..=j) } else { 0.0 },
        );
        let angle = if tilt > 0.0 { r.gen_range(-tilt..=tilt) } else { 0.0 };
        paint(&mut pixels, size, prims, center, scale, angle, color);
    }
    finish(size, pixels, style.noise, r)
}

fn blob<R: Rng + ?Sized>(size: usize, class: usize, r: &mut R) -> ImageTensor {
    let s = size as f64;
    let cy = if class == 0 { 0.25 * s } else { 0.75 * s } + r.gen_range(-0.08..0.08) * s;
    let cx = s / 2.0 + r.gen_range(-0.2..0.2) * s;
    let sigma = s / 8.0;
    let pixels = (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64 + 0.5, (i % size) as f64 + 0.5);
            let v = (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
            [v; 3]
        })
        .collect();
    finish(size, pixels, 0.05, r)
}

fn stripes<R: Rng + ?Sized>(size: usize, r: &mut R) -> Vec<[f64; 3]> {
    let a = random_color(r, 0.2, 0.8);
    let b = random_color(r, 0.2, 0.8);
    let theta = r.gen_range(0.0..PI);
    let period = r.gen_range(3.0..8.0);
    let phase = r.gen_range(0.0..2.0 * PI);
    (0..size * size)
        .map(|i| {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            let t = 0.5 + 0.5 * (2.0 * PI * (x * theta.cos() + y * theta.sin()) / period + phase).sin();
            [0, 1, 2].map(|c| a[c] * t + b[c] * (1.0 - t))
        })
        .collect()
}

fn striped_patch<R: Rng + ?Sized>(size: usize, class: usize, r: &mut R) -> ImageTensor {
    let mut pixels = stripes(size, r);
    let side = (size / 4).max(3);
    let (py, px) = (r.gen_range(0..=size - side), r.gen_range(0..=size - side));
    let fg = if r.gen_bool(0.5) { [0.0; 3] } else { [1.0; 3] };
    let bg = [1.0 - fg[0]; 3];
    let last = (side - 1) as f64;
    for y in 0..side {
        for x in 0..side {
            let (u, v) = (x as f64 / last - 0.5, y as f64 / last - 0.5);
            let on = match class {
                0 => u * u + v * v <= 0.1,
                1 => v.abs() <= 0.15,
                2 => u.abs() <= 0.15,
                3 => (u + v).abs() <= 0.15,
                _ => (u - v).abs() <= 0.15,
            };
            pixels[(py + y) * size + px + x] = if on { fg } else { bg };
        }
    }
    finish(size, pixels, 0.03, r)
}

fn texture<R: Rng + ?Sized>(size: usize, r: &mut R) -> ImageTensor {
    let pixels = stripes(size, r);
    let noise = r.gen_range(0.02..0.15);
    finish(size, pixels, noise, r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let spec = SyntheticSpec::TwoGaussianBlobs {
            count: 200,
            size: 16,
            seed: 1,
        };
        let a = spec.generate(Split::Train).unwrap();
        assert_eq!(a.len(), 200);
        assert_eq!(a.class_counts(), vec![100, 100]);
        assert_eq!(a.checksum(), spec.generate(Split::Train).unwrap().checksum());
        assert_ne!(a.checksum(), spec.generate(Split::Test).unwrap().checksum());
    }

    #[test]
    fn glyph_prefixes_coincide_and_pixels_are_valid() {
        let spec = |count| SyntheticSpec::Glyphs {
            count,
            size: 16,
            seed: 0,
            style: GlyphStyle::default(),
        };
        let small = spec(20).generate(Split::Val).unwrap();
        let large = spec(30).generate(Split::Val).unwrap();
        assert_eq!(small.checksum(), large.take(20).checksum());
        assert!(large.samples().iter().all(|(i, _)| i.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn rotated_class_pairs_match_geometrically() {
        // Class 1 is class 0 turned by 180 degrees, class 5 is class 4 turned clockwise.
        let pts: Vec<(f64, f64)> = (0..400).map(|i| ((i % 20) as f64 / 10.0 - 0.95, (i / 20) as f64 / 10.0 - 0.95)).collect();
        let inside = |g: &[Prim], x: f64, y: f64| g.iter().any(|p| p.contains(x, y));
        for &(x, y) in &pts {
            assert_eq!(inside(&glyph(0), x, y), inside(&glyph(1), -x, -y));
            assert_eq!(inside(&glyph(8), x, y), inside(&glyph(9), y, x));
        }
    }

    #[test]
    fn every_family_generates() {
        for spec in [
            SyntheticSpec::HeldOutGlyphs {
                count: 12,
                size: 16,
                seed: 0,
                style: GlyphStyle::default(),
            },
            SyntheticSpec::StripedPatches {
                count: 10,
                size: 16,
                seed: 0,
            },
            SyntheticSpec::Textures {
                count: 3,
                size: 16,
                seed: 0,
            },
        ] {
            let d = spec.generate(Split::Test).unwrap();
            assert_eq!(d.image_shape(), Some((16, 16, 3)));
        }
    }
}
