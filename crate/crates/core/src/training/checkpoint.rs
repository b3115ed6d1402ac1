//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "SNTFCKPT"
//! version    u32
//! config     u32 length + UTF-8 JSON model configuration
//! count      u32
//! entries    count x { u32 name length, name, u8 dtype tag,
//!                      u32 rank, rank x u64 extents, payload }
//! checksum   u64 FNV-1a of every preceding byte
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SentiFormer};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SNTFCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn encode_checkpoint<S: Scalar>(model: &SentiFormer<S>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config()).expect("config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for p in model.params().iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(S::DTYPE.tag());
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    let sum = fnv1a(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_checkpoint<S: Scalar>(model: &SentiFormer<S>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "checkpoint truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

struct Entry<'a> {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    payload: &'a [u8],
}

struct Parsed<'a> {
    config: ModelConfig,
    entries: Vec<Entry<'a>>,
}

fn parse(bytes: &[u8]) -> Result<Parsed<'_>> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    if bytes.len() < 20 {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { buf: body, pos: 12 };
    let config_len = r.u32("config length")? as usize;
    let config_bytes = r.take(config_len, "config")?;
    let stored_sum = u64::from_le_bytes(tail.try_into().unwrap());
    if stored_sum != fnv1a(body) {
        return Err(Error::Format(
            "checkpoint checksum mismatch (file is truncated or corrupt)".into(),
        ));
    }
    let config: ModelConfig = serde_json::from_slice(config_bytes)
        .map_err(|e| Error::Format(format!("corrupt config header: {e}")))?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag} for '{name}'")))?;
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| Error::Format(format!("absurd shape {shape:?} for '{name}'")))?;
        let payload = r.take(numel, &name)?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            payload,
        });
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after the last entry".into()));
    }
    Ok(Parsed { config, entries })
}

fn decode<S: Scalar>(e: &Entry<'_>) -> Tensor<S> {
    let size = e.dtype.size_of();
    let data = e
        .payload
        .chunks_exact(size)
        .map(|c| match e.dtype {
            d if d == S::DTYPE => S::read_le(c),
            DType::F32 => S::from_f64_lossy(f32::read_le(c) as f64),
            DType::F64 => S::from_f64_lossy(f64::read_le(c)),
        })
        .collect();
    Tensor::new(e.shape.clone(), data).expect("entry extents were validated")
}

/// Rebuilds the model. Entries stored in another precision are converted.
pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<SentiFormer<S>> {
    let parsed = parse(bytes)?;
    parsed
        .config
        .validate()
        .map_err(|e| Error::Format(format!("checkpoint config is invalid: {e}")))?;
    let mut model = SentiFormer::<S>::zeroed(parsed.config)?;
    let mut seen = vec![false; model.params().len()];
    for e in &parsed.entries {
        let id = model
            .params()
            .id(&e.name)
            .ok_or_else(|| Error::Format(format!("unexpected parameter '{}'", e.name)))?;
        if model.params().value(id).shape() != e.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter '{}' has shape {:?}, configuration implies {:?}",
                e.name,
                e.shape,
                model.params().value(id).shape()
            )));
        }
        *model.params_mut().value_mut(id) = decode(e);
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let name = model.params().iter().nth(i).unwrap().name.clone();
        return Err(Error::Format(format!(
            "checkpoint lacks parameter '{name}'"
        )));
    }
    Ok(model)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<SentiFormer<S>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Configuration and storage precision without materializing parameters.
pub fn inspect_checkpoint(path: &Path) -> Result<(ModelConfig, Option<DType>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse(&bytes)?;
    let dtype = parsed.entries.first().map(|e| e.dtype);
    Ok((parsed.config, dtype))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::init::TruncatedNormal;

    fn model() -> SentiFormer<f32> {
        SentiFormer::new(
            ModelConfig::tiny(),
            &mut TruncatedNormal::new(1, 0.02, 0.04),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let back: SentiFormer<f32> = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn precision_conversion_on_load() {
        let m = model();
        let wide: SentiFormer<f64> = decode_checkpoint(&encode_checkpoint(&m)).unwrap();
        let first = m.params().iter().next().unwrap();
        let wide_first = wide.params().iter().next().unwrap();
        assert_eq!(wide_first.value.data()[0], first.value.data()[0] as f64);
    }

    #[test]
    fn damaged_files_are_format_errors() {
        let bytes = encode_checkpoint(&model());
        for cut in [0, 5, 11, 30, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(
                    decode_checkpoint::<f32>(&bytes[..cut]),
                    Err(Error::Format(_))
                ),
                "cut at {cut}"
            );
        }
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        assert!(matches!(
            decode_checkpoint::<f32>(&flipped),
            Err(Error::Format(_))
        ));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        match decode_checkpoint::<f32>(&versioned) {
            Err(Error::Format(m)) => assert!(m.contains("version")),
            other => panic!("{other:?}"),
        }
        let mut extended = bytes;
        extended.push(0);
        assert!(matches!(
            decode_checkpoint::<f32>(&extended),
            Err(Error::Format(_))
        ));
    }
}
