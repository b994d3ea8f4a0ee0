//! Training-time image augmentation.
//!
//! Eight operators run in a fixed order: horizontal flip, rotation, crop,
//! JPEG quality, brightness, saturation, contrast and hue. Each operator has a
//! deterministic form taking its factor explicitly; [`sample_params`] draws the
//! factors and [`apply_params`] applies them, so a pipeline run can be traced.
//! An operator whose configuration is degenerate is skipped and draws nothing.

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{hsv_to_rgb, rgb_to_hsv, Image};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Random horizontal mirroring with probability 1/2.
    pub flip: bool,
    /// Maximum rotation as a fraction of a full turn.
    pub rotation_factor: f64,
    /// Maximum fraction of each side removed by the random crop.
    pub crop_fraction: f64,
    /// Inclusive JPEG quality range; `None` disables the codec round trip.
    pub quality_range: Option<(u8, u8)>,
    pub brightness_delta: f64,
    pub saturation_range: (f64, f64),
    pub contrast_range: (f64, f64),
    /// Maximum hue shift as a fraction of a full turn.
    pub hue_delta: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip: true,
            rotation_factor: 0.005,
            crop_fraction: 0.05,
            quality_range: Some((80, 100)),
            brightness_delta: 0.05,
            saturation_range: (0.6, 1.2),
            contrast_range: (0.75, 1.1),
            hue_delta: 0.03,
        }
    }
}

impl AugmentConfig {
    /// Every operator degenerate: the pipeline returns its input unchanged.
    pub fn disabled() -> Self {
        Self {
            flip: false,
            rotation_factor: 0.0,
            crop_fraction: 0.0,
            quality_range: None,
            brightness_delta: 0.0,
            saturation_range: (1.0, 1.0),
            contrast_range: (1.0, 1.0),
            hue_delta: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.rotation_factor >= 0.0 && self.rotation_factor.is_finite()) {
            return bad(format!("rotation_factor {} must be >= 0", self.rotation_factor));
        }
        if !(0.0..1.0).contains(&self.crop_fraction) {
            return bad(format!("crop_fraction {} outside [0,1)", self.crop_fraction));
        }
        if let Some((lo, hi)) = self.quality_range {
            if lo < 1 || lo > hi || hi > 100 {
                return bad(format!("quality range ({lo}, {hi}) must satisfy 1 <= lo <= hi <= 100"));
            }
        }
        if !(self.brightness_delta >= 0.0 && self.brightness_delta <= 1.0) {
            return bad(format!("brightness_delta {} outside [0,1]", self.brightness_delta));
        }
        if !(self.hue_delta >= 0.0 && self.hue_delta <= 0.5) {
            return bad(format!("hue_delta {} outside [0,0.5]", self.hue_delta));
        }
        for (name, (lo, hi)) in [("saturation", self.saturation_range), ("contrast", self.contrast_range)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range ({lo}, {hi}) must be ordered and non-negative"));
            }
        }
        Ok(())
    }
}

/// Factors drawn for one pipeline run; `None` means the operator is skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    /// Radians.
    pub rotation: Option<f64>,
    /// (removed fraction u, horizontal offset fraction, vertical offset fraction).
    pub crop: Option<(f64, f64, f64)>,
    pub quality: Option<u8>,
    pub brightness: Option<f64>,
    pub saturation: Option<f64>,
    pub contrast: Option<f64>,
    /// Turns.
    pub hue: Option<f64>,
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, delta: f64) -> f64 {
    rng.random_range(-delta..=delta)
}

fn in_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

/// Draws the factors of every enabled operator in pipeline order.
pub fn sample_params<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> AugmentParams {
    let mut p = AugmentParams::default();
    if cfg.flip {
        p.flip = rng.random_bool(0.5);
    }
    if cfg.rotation_factor > 0.0 {
        let max = cfg.rotation_factor * TAU;
        let theta = symmetric(rng, max);
        assert!(theta.abs() <= max, "rotation {theta} outside +-{max}");
        p.rotation = Some(theta);
    }
    if cfg.crop_fraction > 0.0 {
        let u = rng.random_range(0.0..=cfg.crop_fraction);
        assert!((0.0..=cfg.crop_fraction).contains(&u), "crop fraction {u} out of bounds");
        p.crop = Some((u, rng.random::<f64>(), rng.random::<f64>()));
    }
    if let Some((lo, hi)) = cfg.quality_range {
        let q = rng.random_range(lo..=hi);
        assert!((lo..=hi).contains(&q), "quality {q} outside [{lo}, {hi}]");
        p.quality = Some(q);
    }
    if cfg.brightness_delta > 0.0 {
        let b = symmetric(rng, cfg.brightness_delta);
        assert!(b.abs() <= cfg.brightness_delta, "brightness {b} out of bounds");
        p.brightness = Some(b);
    }
    if cfg.saturation_range != (1.0, 1.0) {
        let s = in_range(rng, cfg.saturation_range);
        assert!(s >= cfg.saturation_range.0 && s <= cfg.saturation_range.1, "saturation {s} out of bounds");
        p.saturation = Some(s);
    }
    if cfg.contrast_range != (1.0, 1.0) {
        let c = in_range(rng, cfg.contrast_range);
        assert!(c >= cfg.contrast_range.0 && c <= cfg.contrast_range.1, "contrast {c} out of bounds");
        p.contrast = Some(c);
    }
    if cfg.hue_delta > 0.0 {
        let h = symmetric(rng, cfg.hue_delta);
        assert!(h.abs() <= cfg.hue_delta, "hue {h} out of bounds");
        p.hue = Some(h);
    }
    p
}

pub fn apply_params(img: &Image, p: &AugmentParams) -> Result<Image> {
    let mut out = if p.flip { flip_horizontal(img) } else { img.clone() };
    if let Some(theta) = p.rotation {
        out = rotate(&out, theta);
    }
    if let Some((u, ox, oy)) = p.crop {
        out = crop_resize(&out, u, ox, oy);
    }
    if let Some(q) = p.quality {
        out = jpeg_quality(&out, q)?;
    }
    if let Some(b) = p.brightness {
        out = adjust_brightness(&out, b);
    }
    if let Some(s) = p.saturation {
        out = adjust_saturation(&out, s);
    }
    if let Some(c) = p.contrast {
        out = adjust_contrast(&out, c);
    }
    if let Some(h) = p.hue {
        out = adjust_hue(&out, h);
    }
    Ok(out)
}

/// The stream used for one record in one epoch.
pub fn record_rng(seed: u64, record_id: &str, epoch: u64) -> rand_chacha::ChaCha8Rng {
    seeding::stream("augment", seed, &[&record_id, &epoch])
}

/// Full pipeline with factors drawn from the `(seed, record, epoch)` stream.
pub fn augment(img: &Image, cfg: &AugmentConfig, seed: u64, record_id: &str, epoch: u64) -> Result<Image> {
    augment_traced(img, cfg, seed, record_id, epoch).map(|(out, _)| out)
}

/// Like [`augment`], also returning the factors that were applied.
pub fn augment_traced(
    img: &Image,
    cfg: &AugmentConfig,
    seed: u64,
    record_id: &str,
    epoch: u64,
) -> Result<(Image, AugmentParams)> {
    let params = sample_params(cfg, &mut record_rng(seed, record_id, epoch));
    Ok((apply_params(img, &params)?, params))
}

pub fn flip_horizontal(img: &Image) -> Image {
    img.flip_horizontal()
}

/// Rotation by `theta` radians about the image center, bilinear, edge-replicated.
pub fn rotate(img: &Image, theta: f64) -> Image {
    if theta == 0.0 {
        return img.clone();
    }
    let (cx, cy) = ((img.width() as f64 - 1.0) / 2.0, (img.height() as f64 - 1.0) / 2.0);
    let (s, c) = theta.sin_cos();
    // Inverse mapping: each output pixel pulls from the source rotated by -theta.
    Image::from_fn(img.width(), img.height(), |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        img.sample(cx + c * dx - s * dy, cy + s * dx + c * dy)
    })
}

/// Keeps a `(1 - u)` fraction of each side at relative offsets `(ox, oy)` in `[0,1]`
/// of the slack, then resizes back to the original extent.
pub fn crop_resize(img: &Image, u: f64, ox: f64, oy: f64) -> Image {
    if u == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let (cw, ch) = ((1.0 - u) * w, (1.0 - u) * h);
    img.resample_window(ox * (w - cw), oy * (h - ch), cw, ch, img.width(), img.height())
}

pub fn jpeg_quality(img: &Image, quality: u8) -> Result<Image> {
    img.jpeg_roundtrip(quality)
}

fn clamp01(v: f32) -> f32 {
    v.clamp(0.0, 1.0)
}

pub fn adjust_brightness(img: &Image, delta: f64) -> Image {
    let d = delta as f32;
    let mut out = img.clone();
    out.map_pixels(|p| p.map(|v| clamp01(v + d)));
    out
}

pub fn adjust_saturation(img: &Image, factor: f64) -> Image {
    let mut out = img.clone();
    out.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([h, clamp01(s * factor as f32), v]).map(clamp01)
    });
    out
}

/// `x -> mean + c (x - mean)` with the per-channel image mean.
pub fn adjust_contrast(img: &Image, factor: f64) -> Image {
    let mut mean = [0.0f64; 3];
    for p in img.pixels() {
        for k in 0..3 {
            mean[k] += p[k] as f64;
        }
    }
    let n = (img.width() * img.height()) as f64;
    let mean = mean.map(|m| m / n);
    let mut out = img.clone();
    out.map_pixels(|p| {
        let mut q = [0.0f32; 3];
        for k in 0..3 {
            q[k] = clamp01((mean[k] + factor * (p[k] as f64 - mean[k])) as f32);
        }
        q
    });
    out
}

/// Shifts hue by `turns` of a full circle, wrapping.
pub fn adjust_hue(img: &Image, turns: f64) -> Image {
    let mut out = img.clone();
    out.map_pixels(|p| {
        let [h, s, v] = rgb_to_hsv(p);
        hsv_to_rgb([(h + turns as f32).rem_euclid(1.0), s, v]).map(clamp01)
    });
    out
}
