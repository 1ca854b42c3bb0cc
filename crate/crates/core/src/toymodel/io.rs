//! Binary weight files.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        4 bytes  "SWGW"
//! version      u16
//! config       6 × u32  vocab_size, hidden, heads, layers, max_seq, class_count
//! tensors      u32      number of tensor records
//! per tensor   u16 name length, UTF-8 name, u8 rank, rank × u32 dims
//! data         f32 values of every tensor, in directory order
//! ```
//!
//! The directory must match the layout implied by the config exactly.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{Layout, ModelWeights};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::files::atomic_write_with;

pub const MAGIC: [u8; 4] = *b"SWGW";
pub const FORMAT_VERSION: u16 = 1;

pub fn write_weights<W: Write + ?Sized>(out: &mut W, weights: &ModelWeights) -> Result<()> {
    let c = &weights.config;
    out.write_all(&MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for v in [c.vocab_size, c.hidden, c.heads, c.layers, c.max_seq, c.class_count] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    out.write_all(&(weights.layout.entries.len() as u32).to_le_bytes())?;
    for e in &weights.layout.entries {
        out.write_all(&(e.name.len() as u16).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&[e.shape.len() as u8])?;
        for &d in &e.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    let mut bytes = Vec::with_capacity(weights.data.len() * 4);
    for v in &weights.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// Reads exactly `N` bytes, reporting a truncation against `field`.
fn take<const N: usize, R: Read + ?Sized>(input: &mut R, field: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|e| Error::format(field, format!("truncated file: {e}")))?;
    Ok(buf)
}

fn take_u32<R: Read + ?Sized>(input: &mut R, field: &str) -> Result<usize> {
    Ok(u32::from_le_bytes(take::<4, _>(input, field)?) as usize)
}

pub fn read_weights<R: Read + ?Sized>(input: &mut R) -> Result<ModelWeights> {
    let magic = take::<4, _>(input, "magic")?;
    if magic != MAGIC {
        return Err(Error::format("magic", format!("expected {MAGIC:?}, found {magic:?}")));
    }
    let version = u16::from_le_bytes(take::<2, _>(input, "version")?);
    if version != FORMAT_VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let config = ModelConfig {
        vocab_size: take_u32(input, "config.vocab_size")?,
        hidden: take_u32(input, "config.hidden")?,
        heads: take_u32(input, "config.heads")?,
        layers: take_u32(input, "config.layers")?,
        max_seq: take_u32(input, "config.max_seq")?,
        class_count: take_u32(input, "config.class_count")?,
    };
    config
        .validate()
        .map_err(|e| Error::format("config", e.to_string()))?;
    let layout = Layout::new(&config);
    let count = take_u32(input, "tensor count")?;
    if count != layout.entries.len() {
        return Err(Error::format(
            "tensor count",
            format!("expected {} tensors, found {count}", layout.entries.len()),
        ));
    }
    for expected in &layout.entries {
        let len = u16::from_le_bytes(take::<2, _>(input, &expected.name)?) as usize;
        let mut name = vec![0u8; len];
        input
            .read_exact(&mut name)
            .map_err(|e| Error::format(expected.name.as_str(), format!("truncated file: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format(expected.name.as_str(), "name is not UTF-8"))?;
        if name != expected.name {
            return Err(Error::format(name, format!("expected tensor `{}`", expected.name)));
        }
        let rank = take::<1, _>(input, &name)?[0] as usize;
        let dims = (0..rank)
            .map(|_| take_u32(input, &name))
            .collect::<Result<Vec<_>>>()?;
        if dims != expected.shape {
            return Err(Error::format(
                name,
                format!("dimension mismatch: file has {dims:?}, config implies {:?}", expected.shape),
            ));
        }
    }
    let mut data = vec![0.0f32; layout.total];
    for e in &layout.entries {
        let mut raw = vec![0u8; e.span.len * 4];
        input
            .read_exact(&mut raw)
            .map_err(|err| Error::format(e.name.as_str(), format!("truncated tensor data: {err}")))?;
        for (dst, chunk) in e.span.of_mut(&mut data).iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
        }
    }
    let mut trailing = [0u8; 1];
    if input.read(&mut trailing)? != 0 {
        return Err(Error::format("data", "trailing bytes after last tensor"));
    }
    if let Some(e) = layout.entries.iter().find(|e| e.span.of(&data).iter().any(|v| !v.is_finite())) {
        return Err(Error::format(e.name.as_str(), "non-finite value"));
    }
    Ok(ModelWeights { config, layout, data })
}

pub fn save_weights(path: &Path, weights: &ModelWeights) -> Result<()> {
    atomic_write_with(path, |out| write_weights(out, weights))
}

pub fn load_weights(path: &Path) -> Result<ModelWeights> {
    let file = std::fs::File::open(path)?;
    read_weights(&mut std::io::BufReader::new(file))
}
