//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PSVAE" | u32 version | u32 len, arch string | u32 S | u32 dz | u8 precision
//! u32 tensor count
//! per tensor: u32 len, name | u32 rank | u64 extents... | raw values
//! ```

use std::io::{Read, Write};

use super::{ArchDescriptor, ModelParams};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{Precision, Real, Tensor};
use rand::SeedableRng;

const MAGIC: &[u8; 5] = b"PSVAE";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: u32 = 4096;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub arch: ArchDescriptor,
    pub components: usize,
    pub latent_dim: usize,
    pub precision: Precision,
    pub tensor_count: usize,
}

fn precision_byte(p: Precision) -> u8 {
    match p {
        Precision::F32 => 32,
        Precision::F64 => 64,
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => bad(format!("truncated while reading {what}")),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, 8, what)?.try_into().unwrap()))
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = read_u32(r, what)?;
    if len > MAX_NAME {
        return Err(bad(format!("{what} length {len} is implausible")));
    }
    String::from_utf8(read_exact(r, len as usize, what)?).map_err(|_| bad(format!("{what} is not UTF-8")))
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn read_header<R: Read>(r: &mut R) -> Result<CheckpointHeader> {
    let magic = read_exact(r, 5, "magic")?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = read_u32(r, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let arch: ArchDescriptor = read_string(r, "architecture")?.parse()?;
    let components = read_u32(r, "component count")? as usize;
    let latent_dim = read_u32(r, "latent width")? as usize;
    let precision = match read_exact(r, 1, "precision")?[0] {
        32 => Precision::F32,
        64 => Precision::F64,
        b => return Err(bad(format!("unknown precision tag {b}"))),
    };
    let tensor_count = read_u32(r, "tensor count")? as usize;
    Ok(CheckpointHeader { version, arch, components, latent_dim, precision, tensor_count })
}

pub fn write_checkpoint<T: Real, W: Write>(params: &ModelParams<T>, w: &mut W) -> Result<()> {
    let named = params.named_tensors();
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_string(w, &params.arch.to_string())?;
    w.write_all(&(params.components() as u32).to_le_bytes())?;
    w.write_all(&(params.latent_dim() as u32).to_le_bytes())?;
    w.write_all(&[precision_byte(T::PRECISION)])?;
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    let mut buf = Vec::new();
    for (name, t) in named {
        write_string(w, &name)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint written with the same precision as `T`.
///
/// The tensor set must be exactly what the header's architecture implies:
/// encoder, prior, an optional `dec0` and decoders `dec1..`.
pub fn read_checkpoint<T: Real, R: Read>(r: &mut R) -> Result<ModelParams<T>> {
    let header = read_header(r)?;
    if header.precision != T::PRECISION {
        return Err(bad(format!(
            "checkpoint stores {} values, requested {}",
            header.precision,
            T::PRECISION
        )));
    }
    header.arch.validate().map_err(|e| bad(format!("architecture: {e}")))?;
    let width = T::PRECISION.byte_width();
    let mut loaded: Vec<(String, Tensor<T>)> = Vec::with_capacity(header.tensor_count);
    for _ in 0..header.tensor_count {
        let name = read_string(r, "tensor name")?;
        let rank = read_u32(r, "rank")?;
        if rank > 8 {
            return Err(bad(format!("tensor `{name}` has implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| read_u64(r, "extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e)).ok_or_else(|| bad("extent overflow"))?;
        let bytes = read_exact(r, count * width, &format!("values of `{name}`"))?;
        let data = bytes.chunks_exact(width).map(T::read_le).collect();
        loaded.push((name.clone(), Tensor::new(&shape, data).map_err(|e| bad(format!("`{name}`: {e}")))?));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }

    let has_dummy = loaded.iter().any(|(n, _)| n.starts_with("dec0."));
    let k = loaded
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("dec")?.split('.').next()?.parse::<usize>().ok())
        .max()
        .unwrap_or(0);
    // Build a template with the right shapes, then overwrite every tensor.
    let mut rng = StreamRng::seed_from_u64(0);
    let mut params = ModelParams::<T>::build(&header.arch, header.components, header.latent_dim, k, &mut rng)
        .map_err(|e| bad(format!("cannot rebuild model: {e}")))?;
    if !has_dummy {
        params.dummy = None;
    }
    let mut slots = params.named_tensors_mut();
    if slots.len() != loaded.len() {
        return Err(bad(format!("expected {} tensors for this architecture, found {}", slots.len(), loaded.len())));
    }
    for (name, t) in loaded {
        let slot = slots
            .iter_mut()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| bad(format!("unexpected tensor `{name}`")))?;
        if slot.1.shape() != t.shape() {
            return Err(bad(format!("tensor `{name}` has shape {:?}, expected {:?}", t.shape(), slot.1.shape())));
        }
        *slot.1 = t;
    }
    drop(slots);
    Ok(params)
}
