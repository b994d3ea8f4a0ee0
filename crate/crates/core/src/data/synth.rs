//! Procedural masonry and tile images with painted defects.
//!
//! Positives carry one to four defects (cracks, stains, eroded patches) and a
//! mask of the pixels they touch. The source task used for backbone
//! pretraining draws from the same texture vocabulary with a different key.

use std::f64::consts::TAU;
use std::path::Path;

use image::GrayImage;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageRecord, Manifest, Split};
use crate::error::{Error, Result};
use crate::raster::{hsv_to_rgb, rgb_to_hsv, Image};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthOptions {
    /// Side length of the square images.
    pub size: usize,
    /// Probability that one of the three simulated labelers disagrees.
    pub vote_noise: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            size: 224,
            vote_noise: 0.05,
        }
    }
}

/// One generated image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: Image,
    /// Row-major defect mask, `true` where a defect was painted.
    pub mask: Vec<bool>,
    pub label: u8,
}

impl SynthSample {
    pub fn mask_image(&self) -> GrayImage {
        let (w, h) = (self.image.width() as u32, self.image.height() as u32);
        GrayImage::from_fn(w, h, |x, y| image::Luma([if self.mask[(y * w + x) as usize] { 255 } else { 0 }]))
    }
}

/// Writes `n` images, their masks and `manifest.csv` under `out`.
///
/// Exactly `round(n * positive_fraction)` records are positive; their
/// positions in the id sequence are shuffled.
pub fn synth_generate(out: &Path, n: usize, positive_fraction: f64, seed: u64, opts: &SynthOptions) -> Result<Manifest> {
    if n < 20 {
        return Err(Error::Config(format!("synthetic corpus needs at least 20 images, got {n}")));
    }
    if !(positive_fraction > 0.0 && positive_fraction < 1.0) {
        return Err(Error::Config(format!("positive fraction must lie in (0, 1), got {positive_fraction}")));
    }
    if opts.size < 32 || !(0.0..=1.0).contains(&opts.vote_noise) {
        return Err(Error::Config(format!("invalid synthesis options {opts:?}")));
    }
    let positives = ((n as f64) * positive_fraction).round() as usize;
    let mut labels: Vec<u8> = (0..n).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut seeding::stream("synth-labels", seed, &[]));

    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let width = n.to_string().len().max(3);
    let mut records = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let id = format!("img_{i:0width$}");
        let sample = synth_sample(label, seed, i, opts);
        let rel = Path::new("images").join(format!("{id}.png"));
        sample.image.save_png(&out.join(&rel))?;
        sample
            .mask_image()
            .save(out.join("masks").join(format!("{id}.png")))
            .map_err(|e| Error::Encode(format!("mask for {id}: {e}")))?;
        let votes = simulate_votes(label, opts.vote_noise, &mut seeding::stream("synth-votes", seed, &[&i]));
        records.push(ImageRecord::new(id, rel, votes, Split::Unassigned)?);
    }
    let manifest = Manifest::new(out, records)?;
    manifest.write_csv(&out.join("manifest.csv"))?;
    Ok(manifest)
}

/// Path of the defect mask written next to a generated image.
pub fn mask_path(root: &Path, id: &str) -> std::path::PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

/// With probability `noise` exactly one labeler flips, so the majority stays correct.
fn simulate_votes(label: u8, noise: f64, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let mut votes = [label; 3];
    if rng.random_bool(noise) {
        votes[rng.random_range(0..3)] ^= 1;
    }
    votes
}

/// Deterministic image for record `index` of the corpus keyed by `seed`.
pub fn synth_sample(label: u8, seed: u64, index: usize, opts: &SynthOptions) -> SynthSample {
    let mut rng = seeding::stream("synth-image", seed, &[&index]);
    let size = opts.size;
    let mut canvas = Canvas::new(size);
    paint_background(&mut canvas, &mut rng);
    if label == 1 {
        let count = rng.random_range(1..=4);
        for _ in 0..count {
            match rng.random_range(0..3) {
                0 => paint_crack(&mut canvas, &mut rng, true),
                1 => paint_stain(&mut canvas, &mut rng, true),
                _ => paint_erosion(&mut canvas, &mut rng),
            }
        }
        if !canvas.mask.iter().any(|&m| m) {
            paint_crack(&mut canvas, &mut rng, true);
        }
    }
    canvas.finish(label)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SourceClass {
    Plain,
    Lines,
    Blobs,
    Grid,
}

pub const SOURCE_CLASSES: [SourceClass; 4] = [SourceClass::Plain, SourceClass::Lines, SourceClass::Blobs, SourceClass::Grid];

/// Image of the pretraining task: a texture class keyed apart from the target corpus.
pub fn source_sample(class: SourceClass, seed: u64, index: usize, size: usize) -> Image {
    let mut rng = seeding::stream("source-image", seed, &[&index]);
    let mut canvas = Canvas::new(size);
    paint_background(&mut canvas, &mut rng);
    match class {
        SourceClass::Plain => {}
        SourceClass::Lines => {
            for _ in 0..rng.random_range(2..=4) {
                paint_crack(&mut canvas, &mut rng, false);
            }
        }
        SourceClass::Blobs => {
            for _ in 0..rng.random_range(2..=3) {
                paint_stain(&mut canvas, &mut rng, false);
            }
        }
        SourceClass::Grid => {
            let cell = rng.random_range(size / 8..size / 4) as f64;
            let line = rng.random_range(2.0..4.0);
            let tone = rng.random_range(0.55..0.8);
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            canvas.blend(|x, y| {
                let (u, v) = ((x + y) as f64 + ox, (x as f64 - y as f64).rem_euclid(cell) + oy);
                let on = (u % cell) < line || (v % cell) < line;
                on.then_some(([tone; 3], 0.85))
            });
        }
    }
    canvas.image
}

const BRICK: [[f32; 3]; 4] = [[0.62, 0.30, 0.22], [0.70, 0.42, 0.30], [0.55, 0.35, 0.28], [0.75, 0.55, 0.40]];
const TILE: [[f32; 3]; 4] = [[0.88, 0.86, 0.80], [0.70, 0.78, 0.85], [0.82, 0.80, 0.70], [0.60, 0.70, 0.65]];
const PLASTER: [[f32; 3]; 4] = [[0.85, 0.80, 0.68], [0.74, 0.71, 0.65], [0.80, 0.74, 0.55], [0.66, 0.62, 0.56]];

struct Canvas {
    size: usize,
    image: Image,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            image: Image::filled(size, size, [0.0; 3]),
            mask: vec![false; size * size],
        }
    }

    fn fill(&mut self, mut f: impl FnMut(usize, usize, &mut ChaCha8Rng) -> [f32; 3], rng: &mut ChaCha8Rng) {
        for y in 0..self.size {
            for x in 0..self.size {
                let c = f(x, y, rng);
                self.image.set_pixel(x, y, c);
            }
        }
    }

    /// Alpha-blends `f(x, y) = Some((color, alpha))` over the whole canvas.
    fn blend(&mut self, f: impl Fn(usize, usize) -> Option<([f32; 3], f32)>) {
        for y in 0..self.size {
            for x in 0..self.size {
                if let Some((c, a)) = f(x, y) {
                    let p = self.image.pixel(x, y);
                    self.image.set_pixel(x, y, std::array::from_fn(|k| p[k] * (1.0 - a) + c[k] * a));
                }
            }
        }
    }

    fn finish(mut self, label: u8) -> SynthSample {
        self.image.map_pixels(|p| p.map(|v| v.clamp(0.0, 1.0)));
        SynthSample {
            image: self.image,
            mask: self.mask,
            label,
        }
    }
}

/// Smooth lattice noise in roughly `[-1, 1]`, two octaves.
struct ValueNoise {
    cells: usize,
    cell: f64,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(size: usize, cell: f64, rng: &mut ChaCha8Rng) -> Self {
        let cells = (size as f64 / cell * 2.0).ceil() as usize + 2;
        let grid = (0..cells * cells).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { cells, cell, grid }
    }

    fn lattice(&self, fx: f64, fy: f64) -> f64 {
        let (x0, y0) = (fx.floor(), fy.floor());
        let (tx, ty) = (smooth(fx - x0), smooth(fy - y0));
        let (i, j) = (x0 as usize % self.cells, y0 as usize % self.cells);
        let (i1, j1) = ((i + 1) % self.cells, (j + 1) % self.cells);
        let g = |a: usize, b: usize| self.grid[b * self.cells + a];
        let top = g(i, j) * (1.0 - tx) + g(i1, j) * tx;
        let bottom = g(i, j1) * (1.0 - tx) + g(i1, j1) * tx;
        top * (1.0 - ty) + bottom * ty
    }

    fn at(&self, x: usize, y: usize) -> f32 {
        let (fx, fy) = (x as f64 / self.cell, y as f64 / self.cell);
        (0.7 * self.lattice(fx, fy) + 0.3 * self.lattice(2.0 * fx + 0.5, 2.0 * fy + 0.5)) as f32
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Random brightness shift with a small per-channel tint; palette hue survives.
fn jitter(c: [f32; 3], rng: &mut ChaCha8Rng) -> [f32; 3] {
    let shift = rng.random_range(-0.05..0.05);
    c.map(|v| v + shift + rng.random_range(-0.01..0.01))
}

fn shade(c: [f32; 3], amount: f32) -> [f32; 3] {
    c.map(|v| v * (1.0 + amount))
}

fn grain(rng: &mut ChaCha8Rng, amp: f32) -> f32 {
    rng.random_range(-amp..amp)
}

fn paint_background(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let size = canvas.size;
    let noise = ValueNoise::new(size, rng.random_range(16.0..48.0), rng);
    match rng.random_range(0..3) {
        0 => {
            let base = jitter(BRICK[rng.random_range(0..BRICK.len())], rng);
            let mortar = jitter([0.78, 0.76, 0.72], rng);
            let bh = rng.random_range(size / 10..size / 6).max(4);
            let bw = rng.random_range(2 * bh..4 * bh);
            let gap = rng.random_range(2..=4);
            let tints: Vec<f32> = (0..64).map(|_| rng.random_range(-0.08..0.08)).collect();
            canvas.fill(
                |x, y, rng| {
                    let row = y / bh;
                    let shift = if row % 2 == 1 { bw / 2 } else { 0 };
                    let col = (x + shift) / bw;
                    let in_mortar = y % bh < gap || (x + shift) % bw < gap;
                    let n = 0.15 * noise.at(x, y) + grain(rng, 0.04);
                    if in_mortar {
                        shade(mortar, n)
                    } else {
                        shade(base, n + tints[(row * 7 + col) % tints.len()])
                    }
                },
                rng,
            );
        }
        1 => {
            let base = jitter(TILE[rng.random_range(0..TILE.len())], rng);
            let grout = shade(base, -0.25);
            let cell = rng.random_range(size / 7..size / 4).max(6);
            let gap = rng.random_range(1..=3);
            canvas.fill(
                |x, y, rng| {
                    let n = 0.08 * noise.at(x, y) + grain(rng, 0.02);
                    if x % cell < gap || y % cell < gap {
                        shade(grout, n)
                    } else {
                        shade(base, n)
                    }
                },
                rng,
            );
        }
        _ => {
            let base = jitter(PLASTER[rng.random_range(0..PLASTER.len())], rng);
            canvas.fill(|x, y, rng| shade(base, 0.2 * noise.at(x, y) + grain(rng, 0.05)), rng);
        }
    }
}

/// Jagged dark polyline wandering from a random interior point.
fn paint_crack(canvas: &mut Canvas, rng: &mut ChaCha8Rng, mark: bool) {
    let size = canvas.size as f64;
    let mut p = (rng.random_range(0.15 * size..0.85 * size), rng.random_range(0.15 * size..0.85 * size));
    let mut heading = rng.random_range(0.0..TAU);
    let segments = rng.random_range(6..14);
    let width = rng.random_range(1.5..3.5);
    let darkness = rng.random_range(0.55..0.8) as f32;
    let mut points = vec![p];
    for _ in 0..segments {
        heading += rng.random_range(-0.7..0.7);
        let len = rng.random_range(0.04 * size..0.1 * size);
        p = (p.0 + len * heading.cos(), p.1 + len * heading.sin());
        points.push(p);
    }
    for seg in points.windows(2) {
        let (a, b) = (seg[0], seg[1]);
        let w = width * rng.random_range(0.7..1.3);
        stroke(canvas, a, b, w, darkness, mark);
    }
}

fn stroke(canvas: &mut Canvas, a: (f64, f64), b: (f64, f64), width: f64, darkness: f32, mark: bool) {
    let n = canvas.size as i64;
    let r = width / 2.0 + 1.0;
    let x0 = (a.0.min(b.0) - r).floor().max(0.0) as i64;
    let x1 = ((a.0.max(b.0) + r).ceil() as i64).min(n - 1);
    let y0 = (a.1.min(b.1) - r).floor().max(0.0) as i64;
    let y1 = ((a.1.max(b.1) + r).ceil() as i64).min(n - 1);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = (dx * dx + dy * dy).max(1e-12);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let t = (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0);
            let (cx, cy) = (a.0 + t * dx - px, a.1 + t * dy - py);
            let d = (cx * cx + cy * cy).sqrt();
            let cover = (width / 2.0 + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                let (ux, uy) = (x as usize, y as usize);
                let p = canvas.image.pixel(ux, uy);
                let k = 1.0 - darkness * cover;
                canvas.image.set_pixel(ux, uy, p.map(|v| v * k));
                if mark && cover >= 0.5 {
                    canvas.mask[uy * canvas.size + ux] = true;
                }
            }
        }
    }
}

/// Irregular low-saturation blotch built from overlapping discs with a noisy rim.
fn paint_stain(canvas: &mut Canvas, rng: &mut ChaCha8Rng, mark: bool) {
    let size = canvas.size as f64;
    let center = (rng.random_range(0.2 * size..0.8 * size), rng.random_range(0.2 * size..0.8 * size));
    let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(3..7))
        .map(|_| {
            let r = rng.random_range(0.04 * size..0.1 * size);
            (center.0 + rng.random_range(-r..r), center.1 + rng.random_range(-r..r), r)
        })
        .collect();
    let noise = ValueNoise::new(canvas.size, rng.random_range(6.0..14.0), rng);
    let tint = [
        [0.25, 0.30, 0.22],
        [0.30, 0.26, 0.20],
        [0.22, 0.22, 0.24],
    ][rng.random_range(0..3)];
    let strength = rng.random_range(0.55..0.8) as f32;
    let n = canvas.size;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = discs
                .iter()
                .map(|&(cx, cy, r)| 1.0 - ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / r)
                .fold(f64::NEG_INFINITY, f64::max);
            let v = inside + 0.25 * noise.at(x, y) as f64;
            if v > 0.0 {
                let a = strength * (v * 4.0).min(1.0) as f32;
                let p = canvas.image.pixel(x, y);
                let mut hsv = rgb_to_hsv(std::array::from_fn(|k| p[k] * (1.0 - a) + tint[k] * a));
                hsv[1] *= 0.6;
                canvas.image.set_pixel(x, y, hsv_to_rgb(hsv));
                if mark && a >= 0.3 {
                    canvas.mask[y * n + x] = true;
                }
            }
        }
    }
}

/// Rough, darkened, desaturated region touching one image edge.
fn paint_erosion(canvas: &mut Canvas, rng: &mut ChaCha8Rng) {
    let size = canvas.size as f64;
    let edge = rng.random_range(0..4);
    let along = rng.random_range(0.2 * size..0.8 * size);
    let (cx, cy) = match edge {
        0 => (along, 0.0),
        1 => (size, along),
        2 => (along, size),
        _ => (0.0, along),
    };
    let radius = rng.random_range(0.15 * size..0.3 * size);
    let noise = ValueNoise::new(canvas.size, rng.random_range(5.0..10.0), rng);
    let n = canvas.size;
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() / radius;
            let rough = noise.at(x, y);
            if d + 0.3 * rough as f64 > 1.0 {
                continue;
            }
            let pit: f32 = rng.random_range(0.0..0.35);
            let p = canvas.image.pixel(x, y);
            let mut hsv = rgb_to_hsv(p);
            hsv[1] *= 0.5;
            hsv[2] *= 0.6 - 0.15 * rough - pit;
            canvas.image.set_pixel(x, y, hsv_to_rgb(hsv));
            canvas.mask[y * n + x] = true;
        }
    }
}
