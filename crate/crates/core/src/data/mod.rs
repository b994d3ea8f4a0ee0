//! Dataset manifests, cleaning, orientation fix-up, preprocessing, stratified
//! splitting and a procedural defect-image generator.

mod synth;

pub use synth::{
    mask_path, source_sample, synth_generate, synth_sample, SourceClass, SynthOptions, SynthSample,
    SOURCE_CLASSES,
};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageDecoder, ImageReader, RgbImage};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Image;
use crate::seeding;
use crate::tensor::Tensor;

/// Side length of model inputs after preprocessing.
pub const MODEL_SIZE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub const ASSIGNED: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

/// The label held by at least two of three binary votes.
pub fn majority_vote(votes: &[u8]) -> Result<u8> {
    if votes.len() != 3 {
        return Err(Error::Shape(format!("majority vote needs 3 votes, got {}", votes.len())));
    }
    if votes.iter().any(|&v| v > 1) {
        return Err(Error::Domain(format!("votes must be 0 or 1, got {votes:?}")));
    }
    Ok(u8::from(votes.iter().filter(|&&v| v == 1).count() >= 2))
}

/// One manifest row. `path` is relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRecord {
    pub id: String,
    pub path: PathBuf,
    pub votes: [u8; 3],
    pub label: u8,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, path: impl Into<PathBuf>, votes: [u8; 3], split: Split) -> Result<Self> {
        Ok(Self {
            id: id.into(),
            path: path.into(),
            label: majority_vote(&votes)?,
            votes,
            split,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CsvRow {
    id: String,
    path: String,
    vote1: u8,
    vote2: u8,
    vote3: u8,
    label: u8,
    split: String,
}

/// Ordered list of records plus the directory their paths are relative to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ImageRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ImageRecord>) -> Result<Self> {
        let m = Self {
            root: root.into(),
            records,
        };
        m.validate()?;
        Ok(m)
    }

    /// Unique ids and labels consistent with votes.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Format(format!("duplicate record id `{}`", r.id)));
            }
            if majority_vote(&r.votes)? != r.label {
                return Err(Error::Format(format!(
                    "record `{}` has label {} but votes {:?}",
                    r.id, r.label, r.votes
                )));
            }
        }
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut records = Vec::new();
        for row in reader.deserialize::<CsvRow>() {
            let row = row?;
            records.push(ImageRecord {
                id: row.id,
                path: PathBuf::from(row.path),
                votes: [row.vote1, row.vote2, row.vote3],
                label: row.label,
                split: row.split.parse()?,
            });
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(root, records)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut writer = csv::Writer::from_path(path)?;
        for r in &self.records {
            writer.serialize(CsvRow {
                id: r.id.clone(),
                path: r.path.to_string_lossy().replace('\\', "/"),
                vote1: r.votes[0],
                vote2: r.votes[1],
                vote3: r.votes[2],
                label: r.label,
                split: r.split.as_str().to_string(),
            })?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn resolve(&self, record: &ImageRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> + '_ {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn class_counts(&self) -> BTreeMap<u8, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.label).or_default() += 1;
        }
        out
    }

    /// Record counts keyed by (split, label).
    pub fn split_counts(&self) -> BTreeMap<(Split, u8), usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry((r.split, r.label)).or_default() += 1;
        }
        out
    }
}

/// Builds a manifest from `root/0/*` and `root/1/*`; every vote equals the folder label.
pub fn load_directory(root: &Path) -> Result<Manifest> {
    let mut records = Vec::new();
    for label in [0u8, 1] {
        let dir = root.join(label.to_string());
        if !dir.is_dir() {
            continue;
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        });
        files.sort();
        for f in files {
            let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let rel = f.strip_prefix(root).unwrap_or(&f).to_path_buf();
            records.push(ImageRecord::new(format!("{label}_{stem}"), rel, [label; 3], Split::Unassigned)?);
        }
    }
    if records.is_empty() {
        return Err(Error::Format(format!(
            "no images under {}/0 or {}/1",
            root.display(),
            root.display()
        )));
    }
    Manifest::new(root, records)
}

/// Thresholds of the cleaning step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanPolicy {
    pub min_side: u32,
    pub aspect_min: f64,
    pub aspect_max: f64,
    /// Largest mean absolute difference between any two channels below which an image counts as grayscale.
    pub grayscale_epsilon: f64,
    pub luma_min: f64,
    pub luma_max: f64,
}

impl Default for CleanPolicy {
    fn default() -> Self {
        Self {
            min_side: 224,
            aspect_min: 1.0 / 3.0,
            aspect_max: 3.0,
            grayscale_epsilon: 2.0 / 255.0,
            luma_min: 0.05,
            luma_max: 0.95,
        }
    }
}

impl CleanPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = self.aspect_min > 0.0
            && self.aspect_min <= self.aspect_max
            && self.grayscale_epsilon >= 0.0
            && (0.0..=1.0).contains(&self.luma_min)
            && self.luma_min <= self.luma_max
            && self.luma_max <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("inconsistent cleaning policy {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RejectReason {
    Corrupt,
    AspectRatio,
    MinSide,
    Grayscale,
    Lighting,
}

impl RejectReason {
    pub fn code(self) -> &'static str {
        match self {
            RejectReason::Corrupt => "corrupt",
            RejectReason::AspectRatio => "aspect_ratio",
            RejectReason::MinSide => "min_side",
            RejectReason::Grayscale => "grayscale",
            RejectReason::Lighting => "lighting",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CleanDecision {
    Keep,
    Reject(RejectReason),
}

/// Checks, in order: decodability, aspect ratio, minimum side, grayscale, lighting.
/// The first failing check is the reported reason. `None` stands for an undecodable file.
pub fn clean_filter(img: Option<&RgbImage>, policy: &CleanPolicy) -> CleanDecision {
    use CleanDecision::*;
    let Some(img) = img else {
        return Reject(RejectReason::Corrupt);
    };
    let (w, h) = (img.width(), img.height());
    if w == 0 || h == 0 {
        return Reject(RejectReason::Corrupt);
    }
    let aspect = w as f64 / h as f64;
    if aspect < policy.aspect_min || aspect > policy.aspect_max {
        return Reject(RejectReason::AspectRatio);
    }
    if w.min(h) < policy.min_side {
        return Reject(RejectReason::MinSide);
    }
    let n = (w as f64) * (h as f64);
    let (mut rg, mut gb, mut rb, mut luma) = (0u64, 0u64, 0u64, 0.0f64);
    for p in img.pixels() {
        let [r, g, b] = p.0.map(i32::from);
        rg += r.abs_diff(g) as u64;
        gb += g.abs_diff(b) as u64;
        rb += r.abs_diff(b) as u64;
        luma += 0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64;
    }
    let chroma = rg.max(gb).max(rb) as f64 / n / 255.0;
    if chroma < policy.grayscale_epsilon {
        return Reject(RejectReason::Grayscale);
    }
    let luma = luma / n / 255.0;
    if luma < policy.luma_min || luma > policy.luma_max {
        return Reject(RejectReason::Lighting);
    }
    Keep
}

/// Decodes a file and applies [`clean_filter`].
pub fn clean_file(path: &Path, policy: &CleanPolicy) -> CleanDecision {
    match load_upright(path) {
        Ok(img) => clean_filter(Some(&img), policy),
        Err(_) => clean_filter(None, policy),
    }
}

/// Physically applies an EXIF orientation so the stored raster is upright.
///
/// `None` is treated as tag 1. Tags: 1 identity, 2 mirror, 3 rotate 180,
/// 4 flip vertical, 5 transpose, 6 rotate 90 clockwise, 7 transverse,
/// 8 rotate 270 clockwise.
pub fn exif_normalize(img: &RgbImage, tag: Option<u16>) -> Result<RgbImage> {
    let tag = tag.unwrap_or(1);
    let (w, h) = (img.width(), img.height());
    let swap = matches!(tag, 5..=8);
    let (ow, oh) = if swap { (h, w) } else { (w, h) };
    // Source coordinate for each output coordinate.
    let src: fn(u32, u32, u32, u32) -> (u32, u32) = match tag {
        1 => |x, y, _, _| (x, y),
        2 => |x, y, w, _| (w - 1 - x, y),
        3 => |x, y, w, h| (w - 1 - x, h - 1 - y),
        4 => |x, y, _, h| (x, h - 1 - y),
        5 => |x, y, _, _| (y, x),
        6 => |x, y, _, h| (y, h - 1 - x),
        7 => |x, y, w, h| (w - 1 - y, h - 1 - x),
        8 => |x, y, w, _| (w - 1 - y, x),
        other => return Err(Error::Format(format!("invalid EXIF orientation {other}"))),
    };
    Ok(RgbImage::from_fn(ow, oh, |x, y| {
        let (sx, sy) = src(x, y, w, h);
        *img.get_pixel(sx, sy)
    }))
}

/// Decodes an image file and applies its EXIF orientation, if any.
pub fn load_upright(path: &Path) -> Result<RgbImage> {
    let fmt_err = |e: image::ImageError| Error::Format(format!("{}: {e}", path.display()));
    let mut decoder = ImageReader::open(path)?
        .with_guessed_format()?
        .into_decoder()
        .map_err(fmt_err)?;
    let tag = decoder.orientation().map_err(fmt_err)?.to_exif();
    let img = DynamicImage::from_decoder(decoder).map_err(fmt_err)?.to_rgb8();
    exif_normalize(&img, Some(u16::from(tag)))
}

/// Bilinear resize to 224x224 followed by `x -> 2x - 1`; returns `[224, 224, 3]`.
pub fn resize_normalize(img: &Image) -> Tensor<f32> {
    resize_normalize_to(img, MODEL_SIZE)
}

pub fn resize_normalize_to(img: &Image, size: usize) -> Tensor<f32> {
    let resized = img.resize(size, size);
    let data = resized.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    Tensor::new(vec![size, size, 3], data).expect("consistent extent")
}

/// Per-split counts from the largest-remainder method.
///
/// Exact quotas `ratio * n` are floored; leftover records go to the largest
/// fractional parts, ties to the earlier split.
pub fn largest_remainder(n: usize, ratios: &[f64]) -> Vec<usize> {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Per-class shuffled partition into train/val/test.
pub fn stratified_split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if ratios.iter().any(|&r| !(r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must be positive and sum to 1, got {ratios:?}"
        )));
    }
    let mut out = manifest.clone();
    for (label, count) in manifest.class_counts() {
        if count < ratios.len() {
            return Err(Error::Domain(format!(
                "class {label} has {count} records, fewer than {} splits",
                ratios.len()
            )));
        }
        let mut idx: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| manifest.records[i].label == label)
            .collect();
        idx.shuffle(&mut seeding::stream("split", seed, &[&(label as u64)]));
        let counts = largest_remainder(count, &ratios);
        let mut it = idx.into_iter();
        for (split, n) in Split::ASSIGNED.into_iter().zip(counts) {
            for i in it.by_ref().take(n) {
                out.records[i].split = split;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn votes() {
        assert_eq!(majority_vote(&[1, 1, 0]).unwrap(), 1);
        assert_eq!(majority_vote(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(majority_vote(&[0, 1, 0]).unwrap(), 0);
        assert!(matches!(majority_vote(&[1, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(largest_remainder(1432, &[0.7, 0.15, 0.15]), vec![1002, 215, 215]);
        assert_eq!(largest_remainder(9096, &[0.7, 0.15, 0.15]), vec![6367, 1365, 1364]);
        assert_eq!(largest_remainder(3, &[0.7, 0.15, 0.15]), vec![2, 1, 0]);
    }

    #[test]
    fn split_names_round_trip() {
        for s in [Split::Train, Split::Val, Split::Test, Split::Unassigned] {
            assert_eq!(s.as_str().parse::<Split>().unwrap(), s);
        }
        assert!("holdout".parse::<Split>().is_err());
    }
}
