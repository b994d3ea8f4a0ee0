//! RGB raster type shared by data loading, augmentation and rendering.

use std::path::Path;

use image::{ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(width, height, |_, _| rgb)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        assert!(width > 0 && height > 0, "image extent must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn map_pixels(&mut self, mut f: impl FnMut([f32; 3]) -> [f32; 3]) {
        for p in self.data.chunks_exact_mut(3) {
            p.copy_from_slice(&f([p[0], p[1], p[2]]));
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at integers),
    /// clamping to the nearest edge outside the raster.
    pub fn sample(&self, fx: f64, fy: f64) -> [f32; 3] {
        let fx = fx.clamp(0.0, (self.width - 1) as f64);
        let fy = fy.clamp(0.0, (self.height - 1) as f64);
        let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
        let (a, b, c, d) = (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx;
            let bottom = c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx;
            out[k] = (top * (1.0 - ty) + bottom * ty) as f32;
        }
        out
    }

    /// Bilinear resize with half-pixel centers; same-size resizing is the identity.
    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        self.resample_window(0.0, 0.0, self.width as f64, self.height as f64, width, height)
    }

    /// Resamples the window `[x0, x0 + w) x [y0, y0 + h)` (in pixel-edge coordinates)
    /// onto a `width x height` raster.
    pub fn resample_window(&self, x0: f64, y0: f64, w: f64, h: f64, width: usize, height: usize) -> Image {
        let (sx, sy) = (w / width as f64, h / height as f64);
        Image::from_fn(width, height, |x, y| {
            self.sample(x0 + (x as f64 + 0.5) * sx - 0.5, y0 + (y as f64 + 0.5) * sy - 0.5)
        })
    }

    pub fn flip_horizontal(&self) -> Image {
        Image::from_fn(self.width, self.height, |x, y| self.pixel(self.width - 1 - x, y))
    }

    /// Rec. 601 luma of every pixel.
    pub fn mean_luma(&self) -> f64 {
        let total: f64 = self
            .pixels()
            .map(|[r, g, b]| 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64)
            .sum();
        total / (self.width * self.height) as f64
    }

    pub fn from_rgb8(img: &RgbImage) -> Image {
        let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Image {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let raw: Vec<u8> = self.data.iter().map(|&v| to_u8(v)).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer size matches extent")
    }

    pub fn load(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, ImageFormat::Png)
            .map_err(|e| Error::Encode(format!("{}: {e}", path.display())))
    }

    /// JPEG-encodes at `quality` (1..=100) and decodes again.
    pub fn jpeg_roundtrip(&self, quality: u8) -> Result<Image> {
        let mut buf = Vec::new();
        let encoder = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality);
        self.to_rgb8()
            .write_with_encoder(encoder)
            .map_err(|e| Error::Encode(format!("jpeg encode at quality {quality}: {e}")))?;
        let decoded = image::load_from_memory_with_format(&buf, ImageFormat::Jpeg)
            .map_err(|e| Error::Encode(format!("jpeg decode: {e}")))?;
        Ok(Image::from_rgb8(&decoded.to_rgb8()))
    }

    /// `[H, W, 3]` tensor of the raw values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.height, self.width, 3], self.data.clone()).expect("consistent extent")
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB in `[0,1]` to (hue in turns `[0,1)`, saturation, value).
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Tiles images into a grid of `cols` columns on a black background.
pub fn contact_sheet(images: &[Image], cols: usize) -> Result<Image> {
    let first = images
        .first()
        .ok_or_else(|| Error::Shape("contact sheet of zero images".into()))?;
    if cols == 0 {
        return Err(Error::Config("contact sheet needs at least one column".into()));
    }
    let (w, h) = (first.width, first.height);
    let rows = images.len().div_ceil(cols);
    let mut sheet = Image::filled(w * cols, h * rows, [0.0; 3]);
    for (i, img) in images.iter().enumerate() {
        let tile = if img.width == w && img.height == h {
            img.clone()
        } else {
            img.resize(w, h)
        };
        let (ox, oy) = ((i % cols) * w, (i / cols) * h);
        for y in 0..h {
            for x in 0..w {
                sheet.set_pixel(ox + x, oy + y, tile.pixel(x, y));
            }
        }
    }
    Ok(sheet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for rgb in [[0.2, 0.7, 0.1], [0.9, 0.1, 0.4], [0.5, 0.5, 0.5], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            for k in 0..3 {
                assert!((back[k] - rgb[k]).abs() < 1e-6, "{rgb:?} -> {back:?}");
            }
        }
        assert_eq!(rgb_to_hsv([1.0, 0.0, 0.0])[0], 0.0);
        assert!((rgb_to_hsv([0.0, 1.0, 0.0])[0] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn resize_of_constant_is_constant() {
        let img = Image::filled(448, 448, [0.25, 0.5, 0.75]);
        let small = img.resize(224, 224);
        assert_eq!((small.width(), small.height()), (224, 224));
        assert!(small.pixels().all(|p| p == [0.25, 0.5, 0.75]));
    }

    #[test]
    fn u8_round_trip_is_exact() {
        let img = Image::from_fn(16, 9, |x, y| [x as f32 / 15.0, y as f32 / 8.0, 0.5]);
        let back = Image::from_rgb8(&img.to_rgb8());
        assert_eq!(back.to_rgb8(), img.to_rgb8());
    }

    #[test]
    fn contact_sheet_layout() {
        let tiles: Vec<Image> = (0..9).map(|i| Image::filled(4, 3, [i as f32 / 9.0, 0.0, 0.0])).collect();
        let sheet = contact_sheet(&tiles, 3).unwrap();
        assert_eq!((sheet.width(), sheet.height()), (12, 9));
        assert_eq!(sheet.pixel(11, 8), tiles[8].pixel(0, 0));
    }
}
