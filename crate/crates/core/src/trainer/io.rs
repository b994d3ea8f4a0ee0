//! Binary model container.
//!
//! All integers are little-endian. Layout: magic `DSCN`, `u32` version,
//! `u32` length plus UTF-8 JSON of the architecture, `u8` stage, `u32`
//! parameter count, the parameter records, `u32` batch-norm layer count,
//! the batch-norm records, and the end marker `NCSD`.

use std::io::{Read, Write};
use std::path::Path;

use super::model::{ArchConfig, Model, ModelStage};
use crate::error::{Error, Result};
use crate::nn::{GroupTag, ParamKind};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCN";
pub const END_MARKER: &[u8; 4] = b"NCSD";
pub const FORMAT_VERSION: u32 = 1;

const HEAD_GROUP: u32 = u32::MAX;

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::BnGamma => 2,
        ParamKind::BnBeta => 3,
    }
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let arch = serde_json::to_vec(&model.arch)?;
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(&arch);
    out.push(model.stage.code());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in &model.params {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        let group = match p.group {
            GroupTag::Backbone(i) => i as u32,
            GroupTag::Head => HEAD_GROUP,
        };
        out.extend_from_slice(&group.to_le_bytes());
        out.push(kind_code(p.kind));
        out.push(u8::from(p.trainable));
        out.push(p.value.ndim() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(model.bn.len() as u32).to_le_bytes());
    for s in &model.bn {
        out.extend_from_slice(&(s.running_mean.len() as u32).to_le_bytes());
        out.extend_from_slice(&s.momentum.to_le_bytes());
        out.extend_from_slice(&s.epsilon.to_le_bytes());
        for v in s.running_mean.iter().chain(&s.running_var) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(END_MARKER);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("model file truncated at byte {} (needed {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor size overflows".into()))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Rebuilds a model; every parameter must match the stored architecture by
/// name, group, kind and shape.
pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "model format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchConfig = serde_json::from_slice(r.take(arch_len)?)
        .map_err(|e| Error::Format(format!("architecture description: {e}")))?;
    let stage = r.u8()?;
    let stage = ModelStage::from_code(stage).ok_or_else(|| Error::Format(format!("unknown stage code {stage}")))?;
    let mut model = Model::build(arch, 0).map_err(|e| Error::Format(format!("stored architecture: {e}")))?;
    model.stage = stage;

    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Format(format!(
            "file has {count} parameters, architecture needs {}",
            model.params.len()
        )));
    }
    for p in &mut model.params {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let group = r.u32()?;
        let kind = r.u8()?;
        let trainable = r.u8()?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected_group = match p.group {
            GroupTag::Backbone(i) => i as u32,
            GroupTag::Head => HEAD_GROUP,
        };
        if name != p.name || group != expected_group || kind != kind_code(p.kind) || shape != p.value.shape() || trainable > 1 {
            return Err(Error::Format(format!(
                "parameter `{name}` {shape:?} does not match `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        let n = p.value.len();
        p.value = Tensor::new(shape, r.f32s(n)?)?;
        p.trainable = trainable == 1;
    }
    let bn_count = r.u32()? as usize;
    if bn_count != model.bn.len() {
        return Err(Error::Format(format!(
            "file has {bn_count} batch-norm layers, architecture needs {}",
            model.bn.len()
        )));
    }
    for s in &mut model.bn {
        let channels = r.u32()? as usize;
        if channels != s.running_mean.len() {
            return Err(Error::Format(format!(
                "batch-norm layer has {channels} channels, expected {}",
                s.running_mean.len()
            )));
        }
        s.momentum = r.f64()?;
        s.epsilon = r.f64()?;
        s.running_mean = (0..channels).map(|_| r.f32()).collect::<Result<_>>()?;
        s.running_var = (0..channels).map(|_| r.f32()).collect::<Result<_>>()?;
    }
    if r.take(4)? != END_MARKER {
        return Err(Error::Format("missing end marker".into()));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after end marker", bytes.len() - r.pos)));
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_model(&bytes)
}
