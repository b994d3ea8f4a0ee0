//! Grad-CAM heatmaps, heatmap overlays and feature-map dumps.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::raster::{contact_sheet, Image};
use crate::tensor::{Tape, Tensor};
use crate::trainer::{Model, Pass};

/// Class whose evidence the heatmap shows. The negative class uses the negated logit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Target {
    #[default]
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GradCamConfig {
    /// Backbone block whose post-activation output is explained; `None` is the last one.
    pub tap: Option<usize>,
    pub target: Target,
}

/// Activation of the tapped block for one image and the gradient of the
/// target logit with respect to it, both `[h, w, C]`.
#[derive(Debug, Clone)]
pub struct TapGradient {
    pub tap: usize,
    pub activation: Tensor<f32>,
    pub gradient: Tensor<f32>,
    /// Pre-sigmoid score of the positive class.
    pub logit: f64,
}

impl TapGradient {
    /// Channel weights: spatial mean of the gradient.
    pub fn channel_weights(&self) -> Vec<f64> {
        let &[h, w, c] = self.gradient.shape() else {
            unreachable!("tap gradients are [h, w, C]")
        };
        let mut alpha = vec![0.0f64; c];
        for px in self.gradient.data().chunks_exact(c) {
            for (a, &g) in alpha.iter_mut().zip(px) {
                *a += g as f64;
            }
        }
        let n = (h * w) as f64;
        alpha.iter_mut().for_each(|a| *a /= n);
        alpha
    }
}

/// Max-normalized class-activation map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major `height x width` values in `[0, 1]`.
    pub values: Vec<f64>,
    /// Side of the square upsampled view.
    pub size: usize,
    /// Row-major `size x size` bilinear upsampling of `values`.
    pub upsampled: Vec<f64>,
}

impl Heatmap {
    /// Builds `relu(sum_c alpha_c A_c)` from a `[h, w, C]` activation and
    /// normalizes by its maximum; a map with no positive value stays zero.
    pub fn from_weights(activation: &Tensor<f32>, alpha: &[f64], size: usize) -> Result<Self> {
        let &[h, w, c] = activation.shape() else {
            return Err(Error::Shape(format!("activation must be [h, w, C], got {:?}", activation.shape())));
        };
        if alpha.len() != c {
            return Err(Error::Shape(format!("{} channel weights for {c} channels", alpha.len())));
        }
        if size == 0 {
            return Err(Error::Config("heatmap size must be positive".into()));
        }
        let mut values: Vec<f64> = activation
            .data()
            .chunks_exact(c)
            .map(|px| px.iter().zip(alpha).map(|(&a, &k)| a as f64 * k).sum::<f64>().max(0.0))
            .collect();
        let max = values.iter().copied().fold(0.0f64, f64::max);
        if max > 0.0 {
            values.iter_mut().for_each(|v| *v = (*v / max).min(1.0));
        }
        let upsampled = bilinear(&values, w, h, size, size);
        Ok(Self {
            width: w,
            height: h,
            values,
            size,
            upsampled,
        })
    }

    /// Bilinear resampling of the map onto a `width x height` grid.
    pub fn resample(&self, width: usize, height: usize) -> Vec<f64> {
        bilinear(&self.values, self.width, self.height, width, height)
    }

    /// Share of the total heatmap mass that falls inside `mask`, a row-major
    /// `width x height` raster. Zero for an all-zero map.
    pub fn mass_inside(&self, mask: &[bool], width: usize, height: usize) -> Result<f64> {
        if mask.len() != width * height {
            return Err(Error::Shape(format!("mask has {} pixels, expected {width}x{height}", mask.len())));
        }
        let map = self.resample(width, height);
        let total: f64 = map.iter().sum();
        if total <= 0.0 {
            return Ok(0.0);
        }
        let inside: f64 = map.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
        Ok(inside / total)
    }
}

/// Half-pixel-center bilinear resize of a single-channel raster, clamped at the edges.
fn bilinear(src: &[f64], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let (sx, sy) = (w as f64 / out_w as f64, h as f64 / out_h as f64);
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn resolve_tap(model: &Model, tap: Option<usize>) -> Result<usize> {
    let n = model.num_blocks();
    match tap {
        None if n > 0 => Ok(n - 1),
        Some(t) if t < n => Ok(t),
        _ => Err(Error::Config(format!("no convolutional block {tap:?} to explain (backbone has {n})"))),
    }
}

/// Eval-mode activation of block `tap` for one image: `[1, h, w, C]`.
fn activation_at(model: &mut Model, image: &Image, tap: usize) -> Result<Tensor<f32>> {
    let x = model.preprocess(std::slice::from_ref(image))?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let x = tape.constant(x);
    let a = model.run_blocks(&mut tape, x, &vars, 0..tap + 1, Mode::Eval)?;
    Ok(tape.value(a).clone())
}

/// Eval-mode positive-class logit obtained by feeding `activation`
/// (`[h, w, C]` or `[1, h, w, C]`) into the blocks after `tap` and the head.
pub fn logit_from_tap(model: &mut Model, activation: &Tensor<f32>, tap: usize) -> Result<f64> {
    let tap = resolve_tap(model, Some(tap))?;
    let a = batched(activation)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let a = tape.constant(a);
    let features = model.run_blocks(&mut tape, a, &vars, tap + 1..model.num_blocks(), Mode::Eval)?;
    let (logit, _) = model.head(&mut tape, features, &vars, &mut Pass::Eval)?;
    Ok(tape.value(logit).item()? as f64)
}

fn batched(activation: &Tensor<f32>) -> Result<Tensor<f32>> {
    match *activation.shape() {
        [h, w, c] => activation.clone().reshape(vec![1, h, w, c]),
        [1, _, _, _] => Ok(activation.clone()),
        _ => Err(Error::Shape(format!(
            "expected one activation [h, w, C], got {:?}",
            activation.shape()
        ))),
    }
}

/// Gradient of the target logit with respect to the tapped activation.
pub fn tap_gradient(model: &mut Model, image: &Image, cfg: GradCamConfig) -> Result<TapGradient> {
    let tap = resolve_tap(model, cfg.tap)?;
    let activation = activation_at(model, image, tap)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, false);
    let a = tape.leaf(activation.clone(), true);
    let features = model.run_blocks(&mut tape, a, &vars, tap + 1..model.num_blocks(), Mode::Eval)?;
    let (logit, _) = model.head(&mut tape, features, &vars, &mut Pass::Eval)?;
    let score = tape.value(logit).item()? as f64;
    let objective = match cfg.target {
        Target::Positive => logit,
        Target::Negative => tape.mul_scalar(logit, -1.0)?,
    };
    let grads = tape.backward(objective)?;
    let gradient = grads
        .get(a)
        .cloned()
        .ok_or_else(|| Error::State("tapped activation received no gradient".into()))?;
    let &[_, h, w, c] = activation.shape() else {
        unreachable!("backbone activations are [N, h, w, C]")
    };
    Ok(TapGradient {
        tap,
        activation: activation.reshape(vec![h, w, c])?,
        gradient: gradient.reshape(vec![h, w, c])?,
        logit: score,
    })
}

/// Grad-CAM for one image, upsampled to the model's input size.
pub fn gradcam(model: &mut Model, image: &Image, cfg: GradCamConfig) -> Result<Heatmap> {
    let tg = tap_gradient(model, image, cfg)?;
    Heatmap::from_weights(&tg.activation, &tg.channel_weights(), model.arch.input_size)
}

/// Piecewise-linear blue, green, red colormap over `[0, 1]`.
pub fn colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.5 {
        let s = 2.0 * t;
        [0.0, s as f32, (1.0 - s) as f32]
    } else {
        let s = 2.0 * t - 1.0;
        [s as f32, (1.0 - s) as f32, 0.0]
    }
}

/// Blends the colormapped heatmap over `image` with weight `alpha`.
pub fn overlay(image: &Image, heatmap: &Heatmap, alpha: f64) -> Result<Image> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("overlay alpha {alpha} is outside [0, 1]")));
    }
    let (w, h) = (image.width(), image.height());
    let map = heatmap.resample(w, h);
    let a = alpha as f32;
    Ok(Image::from_fn(w, h, |x, y| {
        let base = image.pixel(x, y);
        let tint = colormap(map[y * w + x]);
        [0, 1, 2].map(|k| (1.0 - a) * base[k] + a * tint[k])
    }))
}

/// Which backbone block's activation to dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSelector {
    First,
    Middle,
    Last,
    Block(usize),
}

impl LayerSelector {
    pub fn resolve(self, blocks: usize) -> Result<usize> {
        let idx = match self {
            LayerSelector::First => 0,
            LayerSelector::Middle => blocks / 2,
            LayerSelector::Last => blocks.wrapping_sub(1),
            LayerSelector::Block(i) => i,
        };
        if idx < blocks {
            Ok(idx)
        } else {
            Err(Error::Config(format!("layer {self:?} does not exist in a {blocks}-block backbone")))
        }
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "first" => Ok(LayerSelector::First),
            "mid" | "middle" => Ok(LayerSelector::Middle),
            "last" => Ok(LayerSelector::Last),
            other => other
                .parse()
                .map(LayerSelector::Block)
                .map_err(|_| Error::Config(format!("unknown layer `{other}` (first, mid, last or a block index)"))),
        }
    }
}

/// Per-channel activations of one block, each min-max normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMaps {
    pub block: usize,
    pub width: usize,
    pub height: usize,
    /// One row-major `height x width` map per channel.
    pub maps: Vec<Vec<f32>>,
}

impl FeatureMaps {
    pub fn channels(&self) -> usize {
        self.maps.len()
    }

    pub fn layer_name(&self) -> String {
        format!("backbone.{}", self.block)
    }

    /// Grayscale contact sheet of all channels, `scale` pixels per activation.
    pub fn grid(&self, scale: usize) -> Result<Image> {
        let scale = scale.max(1);
        let tiles: Vec<Image> = self
            .maps
            .iter()
            .map(|m| {
                Image::from_fn(self.width * scale, self.height * scale, |x, y| {
                    [m[(y / scale) * self.width + x / scale]; 3]
                })
            })
            .collect();
        let cols = (self.maps.len() as f64).sqrt().ceil() as usize;
        contact_sheet(&tiles, cols.max(1))
    }
}

/// Eval-mode activations of the selected block; constant channels map to 0.5.
pub fn feature_maps(model: &mut Model, image: &Image, selector: LayerSelector) -> Result<FeatureMaps> {
    let block = selector.resolve(model.num_blocks())?;
    let a = activation_at(model, image, block)?;
    let &[_, h, w, c] = a.shape() else {
        unreachable!("backbone activations are [N, h, w, C]")
    };
    let data = a.data();
    let maps = (0..c)
        .map(|k| {
            let ch: Vec<f32> = (0..h * w).map(|i| data[i * c + k]).collect();
            let lo = ch.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = ch.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            if span <= f32::EPSILON * hi.abs().max(1.0) {
                vec![0.5; ch.len()]
            } else {
                ch.iter().map(|v| (v - lo) / span).collect()
            }
        })
        .collect();
    Ok(FeatureMaps {
        block,
        width: w,
        height: h,
        maps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), [0.0, 0.0, 1.0]);
        assert_eq!(colormap(0.5), [0.0, 1.0, 0.0]);
        assert_eq!(colormap(1.0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn selectors_parse() {
        assert_eq!("mid".parse::<LayerSelector>().unwrap(), LayerSelector::Middle);
        assert_eq!("3".parse::<LayerSelector>().unwrap(), LayerSelector::Block(3));
        assert!("deep".parse::<LayerSelector>().is_err());
        assert_eq!(LayerSelector::Middle.resolve(8).unwrap(), 4);
        assert!(LayerSelector::Block(8).resolve(8).is_err());
    }
}
