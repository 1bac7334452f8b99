//! HTNT binary tensor files.
//!
//! Layout (no padding, no checksum):
//!
//! ```text
//! b"HTNT" | version u8 = 0x01 | dtype u8 = 0x00 (f32) | rank u8
//!        | rank x u32 LE extents | row-major f32 LE payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HTNT";
pub const VERSION: u8 = 0x01;
pub const DTYPE_F32: u8 = 0x00;

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} does not fit a byte", t.rank())));
    }
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + 4 * t.numel());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    buf.push(t.rank() as u8);
    for &d in t.dims() {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("extent {d} does not fit u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let short = || Error::Format("truncated HTNT data".into());
    if bytes.len() < 7 {
        return Err(short());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected HTNT".into()));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported HTNT version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported HTNT dtype {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(short());
    }
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != 4 * numel {
        return Err(Error::Format(format!(
            "payload holds {} bytes, dims {:?} need {}",
            payload.len(),
            dims,
            4 * numel
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

pub fn write<T: Real, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let bytes = encode(t)?;
    w.write_all(&bytes)
        .map_err(|e| Error::io("<writer>", e))
}

pub fn read<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    decode(&bytes)
}

pub fn save<T: Real>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&encode(t)?).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
