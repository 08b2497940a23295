//! SPCK parameter checkpoints.
//!
//! ```text
//! "SPCK" | version: u16 | layers: u32
//! manifest, per layer: type: u8 (0 conv, 1 dense) | branch: u8 | ndims: u8 | dims: u32 * ndims
//!                      | stride: u32 | padding: u32
//! payload, per layer in manifest order: weights then bias, f32 little-endian
//! ```
//!
//! Dense layers record `dims = [out, in]` and zero stride/padding. The bias
//! length is the first dimension.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum LayerType {
    Conv = 0,
    Dense = 1,
}

/// Which part of a model a layer belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BranchTag {
    GlobalTrunk = 0,
    LocalTrunk = 1,
    Head = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub layer_type: LayerType,
    pub branch: BranchTag,
    pub dims: Vec<u32>,
    pub stride: u32,
    pub padding: u32,
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerRecord {
    fn weight_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn bias_len(&self) -> usize {
        self.dims.first().copied().unwrap_or(0) as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub layers: Vec<LayerRecord>,
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    input
        .read_exact(&mut b)
        .map_err(|_| Error::Format("truncated SPCK checkpoint".into()))?;
    Ok(b)
}

impl Checkpoint {
    pub fn write(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for l in &self.layers {
            if l.weight.len() != l.weight_len() || l.bias.len() != l.bias_len() {
                return Err(Error::Shape(format!(
                    "layer payload does not match dims {:?}",
                    l.dims
                )));
            }
            out.write_all(&[l.layer_type as u8, l.branch as u8, l.dims.len() as u8])?;
            for d in &l.dims {
                out.write_all(&d.to_le_bytes())?;
            }
            out.write_all(&l.stride.to_le_bytes())?;
            out.write_all(&l.padding.to_le_bytes())?;
        }
        for l in &self.layers {
            for v in l.weight.iter().chain(&l.bias) {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(input: &mut impl Read) -> Result<Self> {
        if &read_array::<4>(input)? != MAGIC {
            return Err(Error::Format("not an SPCK checkpoint".into()));
        }
        let version = u16::from_le_bytes(read_array(input)?);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported SPCK version {version}")));
        }
        let count = u32::from_le_bytes(read_array(input)?) as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let [t, b, nd] = read_array::<3>(input)?;
            let layer_type = match t {
                0 => LayerType::Conv,
                1 => LayerType::Dense,
                other => return Err(Error::Format(format!("unknown layer type {other}"))),
            };
            let branch = match b {
                0 => BranchTag::GlobalTrunk,
                1 => BranchTag::LocalTrunk,
                2 => BranchTag::Head,
                other => return Err(Error::Format(format!("unknown branch tag {other}"))),
            };
            let dims = (0..nd)
                .map(|_| read_array(input).map(u32::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            let stride = u32::from_le_bytes(read_array(input)?);
            let padding = u32::from_le_bytes(read_array(input)?);
            layers.push(LayerRecord {
                layer_type,
                branch,
                dims,
                stride,
                padding,
                weight: Vec::new(),
                bias: Vec::new(),
            });
        }
        for l in layers.iter_mut() {
            let (nw, nb) = (l.weight_len(), l.bias_len());
            l.weight = (0..nw)
                .map(|_| read_array(input).map(f32::from_le_bytes))
                .collect::<Result<_>>()?;
            l.bias = (0..nb)
                .map(|_| read_array(input).map(f32::from_le_bytes))
                .collect::<Result<_>>()?;
        }
        Ok(Checkpoint { layers })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let ck = Checkpoint {
            layers: vec![
                LayerRecord {
                    layer_type: LayerType::Conv,
                    branch: BranchTag::LocalTrunk,
                    dims: vec![2, 1, 3, 3],
                    stride: 2,
                    padding: 1,
                    weight: (0..18).map(|i| i as f32 * 0.5).collect(),
                    bias: vec![0.25, -0.25],
                },
                LayerRecord {
                    layer_type: LayerType::Dense,
                    branch: BranchTag::Head,
                    dims: vec![3, 2],
                    stride: 0,
                    padding: 0,
                    weight: vec![1.0; 6],
                    bias: vec![0.0, 1.0, 2.0],
                },
            ],
        };
        let mut buf = Vec::new();
        ck.write(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SPCK");
        assert_eq!(Checkpoint::read(&mut buf.as_slice()).unwrap(), ck);
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            Checkpoint::read(&mut buf.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
