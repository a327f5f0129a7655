//! `CASV` checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "CASV" | version u16 | config_len u32 | config JSON (UTF-8)
//! entry_count u32
//! entry*: name_len u32 | name | dtype u8 | rank u8 | extents u32[rank] | offset u64
//! payloads (raw elements at the absolute offsets)
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{BackboneParams, VariantConfig};
use crate::error::{Error, FormatCode, Result};
use crate::nn::Module;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CASV";
pub const CHECKPOINT_VERSION: u16 = 1;

/// One tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub offset: u64,
}

impl Entry {
    fn byte_len(&self) -> u64 {
        (self.shape.iter().product::<usize>() * self.dtype.size()) as u64
    }
}

/// Serialises every tensor of `params` (weights and running statistics) in `T`'s dtype.
pub fn checkpoint_to_bytes<T: Scalar>(params: &BackboneParams<T>, cfg: &VariantConfig) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let tensors = params.named_tensors("");
    let mut header = Vec::new();
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    header.extend_from_slice(&(json.len() as u32).to_le_bytes());
    header.extend_from_slice(&json);
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let table_len: usize = tensors
        .iter()
        .map(|(n, t, _)| 4 + n.len() + 2 + 4 * t.rank() + 8)
        .sum();
    let mut offset = (header.len() + table_len) as u64;
    let mut payload = Vec::new();
    for (name, t, _) in &tensors {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.push(T::DTYPE.tag());
        header.push(t.rank() as u8);
        for &e in t.shape() {
            header.extend_from_slice(&(e as u32).to_le_bytes());
        }
        header.extend_from_slice(&offset.to_le_bytes());
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        offset += (t.numel() * T::DTYPE.size()) as u64;
    }
    header.extend_from_slice(&payload);
    Ok(header)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(FormatCode::Truncated, format!("file ends inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses and validates the header: magic, version, config, entry table, payload spans.
pub fn read_header(bytes: &[u8]) -> Result<(VariantConfig, Vec<Entry>)> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(FormatCode::BadMagic, "not a CASV checkpoint"));
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u16("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            FormatCode::UnsupportedVersion,
            format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let json_len = r.u32("config length")? as usize;
    let json = r.take(json_len, "config")?;
    let cfg: VariantConfig =
        serde_json::from_slice(json).map_err(|e| Error::format(FormatCode::Malformed, format!("config: {e}")))?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32("entry name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "entry name")?)
            .map_err(|e| Error::format(FormatCode::Malformed, format!("entry name: {e}")))?
            .to_string();
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::format(FormatCode::Malformed, format!("`{name}` has unknown dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("extents")? as usize);
        }
        let offset = r.u64("offset")?;
        entries.push(Entry {
            name,
            dtype,
            shape,
            offset,
        });
    }
    let table_end = r.pos as u64;
    let mut spans: Vec<(u64, u64, &str)> = entries
        .iter()
        .map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str()))
        .collect();
    spans.sort_unstable();
    let mut prev_end = table_end;
    let mut prev_name = "header";
    for &(start, end, name) in &spans {
        if start < prev_end {
            return Err(Error::format(
                FormatCode::OverlappingOffsets,
                format!("`{name}` at offset {start} overlaps `{prev_name}` ending at {prev_end}"),
            ));
        }
        if end > bytes.len() as u64 {
            return Err(Error::format(
                FormatCode::Truncated,
                format!("`{name}` needs bytes up to {end}, file has {}", bytes.len()),
            ));
        }
        prev_end = end;
        prev_name = name;
    }
    Ok((cfg, entries))
}

fn read_tensor<T: Scalar>(bytes: &[u8], e: &Entry) -> Tensor<T> {
    let start = e.offset as usize;
    let size = e.dtype.size();
    let n: usize = e.shape.iter().product();
    let raw = &bytes[start..start + n * size];
    let data: Vec<T> = match e.dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::new(e.shape.clone(), data).expect("extent product matches payload")
}

/// Overwrites every tensor of `params` from checkpoint bytes, checking names and shapes.
/// On error `params` is left untouched.
pub fn load_into<T: Scalar>(bytes: &[u8], params: &mut BackboneParams<T>) -> Result<VariantConfig> {
    let (cfg, entries) = read_header(bytes)?;
    let mut by_name: std::collections::HashMap<&str, &Entry> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut failure = None;
    let mut staged = params.clone();
    staged.visit_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match by_name.remove(name) {
            None => failure = Some(Error::format(FormatCode::ShapeMismatch, format!("tensor `{name}` is missing"))),
            Some(e) if e.shape != t.shape() => {
                failure = Some(Error::format(
                    FormatCode::ShapeMismatch,
                    format!("tensor `{name}`: checkpoint {:?}, model {:?}", e.shape, t.shape()),
                ))
            }
            Some(e) => *t = read_tensor(bytes, e),
        }
    });
    if let Some(f) = failure {
        return Err(f);
    }
    if let Some(extra) = entries.iter().find(|e| by_name.contains_key(e.name.as_str())) {
        return Err(Error::format(
            FormatCode::ShapeMismatch,
            format!("checkpoint tensor `{}` has no counterpart in the model", extra.name),
        ));
    }
    *params = staged;
    Ok(cfg)
}

pub fn checkpoint_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<(VariantConfig, BackboneParams<T>)> {
    let (cfg, _) = read_header(bytes)?;
    let mut params = BackboneParams::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| Error::format(FormatCode::Malformed, format!("embedded config: {e}")))?;
    load_into(bytes, &mut params)?;
    Ok((cfg, params))
}

pub fn save_checkpoint<T: Scalar>(params: &BackboneParams<T>, cfg: &VariantConfig, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(params, cfg)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(VariantConfig, BackboneParams<T>)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
