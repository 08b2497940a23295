//! SPT4 flat tensor files.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "SPT4" | version: u16 | N, C, H, W: u32 | dtype: u8 (0 = f32, 1 = f64) | payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Shape4, Tensor4};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPT4";
pub const VERSION: u16 = 1;

pub fn write<T: Real, W: Write>(out: &mut W, t: &Tensor4<T>) -> Result<()> {
    let s = t.shape();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for d in [s.n, s.c, s.h, s.w] {
        let d =
            u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    out.write_all(&[T::DTYPE_TAG])?;
    match T::DTYPE_TAG {
        0 => {
            for v in t.data() {
                out.write_all(&(v.as_f64() as f32).to_le_bytes())?;
            }
        }
        _ => {
            for v in t.data() {
                out.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Reads any SPT4 payload, widening `f32` data to the requested element type.
pub fn read<T: Real, R: Read>(input: &mut R) -> Result<Tensor4<T>> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated SPT4 header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad SPT4 magic {magic:?}")));
    }
    let mut u16buf = [0u8; 2];
    input
        .read_exact(&mut u16buf)
        .map_err(|_| Error::Format("truncated SPT4 header".into()))?;
    let version = u16::from_le_bytes(u16buf);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SPT4 version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        input
            .read_exact(&mut b)
            .map_err(|_| Error::Format("truncated SPT4 header".into()))?;
        *d = u32::from_le_bytes(b) as usize;
    }
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    shape.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut tag = [0u8; 1];
    input
        .read_exact(&mut tag)
        .map_err(|_| Error::Format("truncated SPT4 header".into()))?;
    let width = match tag[0] {
        0 => 4,
        1 => 8,
        other => return Err(Error::Format(format!("unknown SPT4 dtype tag {other}"))),
    };
    let mut payload = vec![0u8; shape.len() * width];
    input
        .read_exact(&mut payload)
        .map_err(|_| Error::Format(format!("SPT4 payload shorter than {shape} requires")))?;
    let mut rest = [0u8; 1];
    if input.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after SPT4 payload".into()));
    }
    let data: Vec<T> = if width == 4 {
        payload
            .chunks_exact(4)
            .map(|b| T::from_f64(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().unwrap())))
            .collect()
    };
    Tensor4::new(shape, data)
}

pub fn save<T: Real>(path: &Path, t: &Tensor4<T>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write(&mut w, t)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Tensor4<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read(&mut BufReader::new(f))
}
