//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      4 bytes  "FECW"
//! version    u32      1
//! header_len u32      length of the JSON header that follows
//! header     UTF-8    {"config": ModelConfig, "input_stats": ChannelStats | null}
//! count      u32      number of tensors
//! per tensor:
//!   name_len u16, name (UTF-8)
//!   dtype    u8       4 = f32, 8 = f64
//!   ndim     u8, dims u32 × ndim
//!   values   numel × dtype bytes
//! crc32      u32      CRC-32 (IEEE) of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_model, ChannelStats, Model, ModelConfig};
use crate::error::{FecError, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"FECW";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    input_stats: Option<ChannelStats>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(FecError::CorruptCheckpoint(msg.into()))
}

pub fn encode_checkpoint<T: Float>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { config: model.config.clone(), input_stats: model.input_stats.clone() })?;
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for p in model.params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(T::DTYPE.tag());
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint<T: Float>(model: &Model<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(model)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return corrupt("unexpected end of data");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a checkpoint into a model with element type `T`. Values stored at
/// a different precision are converted.
pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 16 {
        return corrupt(format!("{} bytes is too short", bytes.len()));
    }
    if &bytes[..4] != MAGIC {
        return corrupt("bad magic");
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return corrupt("checksum mismatch");
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return corrupt(format!("unsupported format version {version}"));
    }
    let header_len = r.u32()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(header_len)?).map_err(|e| FecError::CorruptCheckpoint(format!("header: {e}")))?;
    let mut model = build_model::<T>(&header.config)?;
    model.input_stats = header.input_stats;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return corrupt(format!("{count} tensors stored, the configured model has {}", model.params.len()));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| FecError::CorruptCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| FecError::CorruptCheckpoint(format!("{name}: bad dtype")))?;
        let ndim = r.u8()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let expected = model.params.get(id);
        if expected.name != name || expected.value.shape() != shape.as_slice() {
            return Err(FecError::Config(format!(
                "checkpoint tensor {name} {shape:?} does not match the model's {} {:?}",
                expected.name,
                expected.value.shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => r.take(numel * 4)?.chunks(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
            DType::F64 => r.take(numel * 8)?.chunks(8).map(|c| T::of(f64::read_le(c))).collect(),
        };
        model.params.set(id, Tensor::new(shape, data)?)?;
    }
    if r.pos != body.len() {
        return corrupt("trailing bytes after the tensor table");
    }
    Ok(model)
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<Model<T>> {
    decode_checkpoint(&fs::read(path)?)
}

/// Loads and insists the stored configuration equals `expected`.
pub fn load_checkpoint_for<T: Float>(path: &Path, expected: &ModelConfig) -> Result<Model<T>> {
    let model = load_checkpoint::<T>(path)?;
    if &model.config != expected {
        return Err(FecError::Config(format!(
            "checkpoint {} was saved for a different model configuration",
            path.display()
        )));
    }
    Ok(model)
}
