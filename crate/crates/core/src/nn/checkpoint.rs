//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic       8 bytes  "DYNXCKPT"
//! version     u32      1
//! precision   u8       4 (f32 blobs) or 8 (f64 blobs)
//! header_len  u32
//! header      header_len bytes of UTF-8 JSON:
//!             {"descriptor": {...}, "mask_rle": [..] | null, "blobs": <count>}
//! blobs       repeated <count> times:
//!             name_len u32, name (UTF-8), ndim u32, dims u64 × ndim,
//!             values (IEEE-754, declared precision) × product(dims)
//! ```
//!
//! Blob names are `conv{l}.weight`, `conv{l}.bias`, `conv{l}.bn.gamma`,
//! `conv{l}.bn.beta`, `conv{l}.bn.running_mean`, `conv{l}.bn.running_var`,
//! `head.weight` and `head.bias`.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchDescriptor, ConvUnit, Model, ModelError, ParamRole};
use crate::channel::ChannelMask;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DYNXCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("unsupported precision code {0}")]
    Precision(u8),
    #[error("header: {0}")]
    Header(String),
    #[error("missing blob {0}")]
    MissingBlob(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    descriptor: ArchDescriptor,
    mask_rle: Option<Vec<usize>>,
    blobs: usize,
}

/// A model plus the mask it was trained or extracted under.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub mask: Option<ChannelMask>,
}

fn blobs_of(model: &Model) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for role in model.param_roles() {
        out.push((role.name(), model.param(role).clone()));
    }
    for (l, unit) in model.conv_units().iter().enumerate() {
        out.push((format!("conv{l}.bn.running_mean"), Tensor::from_vec(unit.running_mean.clone())));
        out.push((format!("conv{l}.bn.running_var"), Tensor::from_vec(unit.running_var.clone())));
    }
    out
}

pub fn write<W: Write>(
    mut w: W,
    model: &Model,
    mask: Option<&ChannelMask>,
    precision: Precision,
) -> Result<(), CheckpointError> {
    let blobs = blobs_of(model);
    let header = Header {
        descriptor: model.descriptor().clone(),
        mask_rle: mask.map(ChannelMask::to_rle),
        blobs: blobs.len(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| CheckpointError::Header(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[precision.code()])?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for (name, t) in blobs {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match precision {
            Precision::F64 => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Precision::F32 => {
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let mut p = [0u8; 1];
    r.read_exact(&mut p)?;
    let precision = match p[0] {
        4 => Precision::F32,
        8 => Precision::F64,
        other => return Err(CheckpointError::Precision(other)),
    };
    let hlen = read_u32(&mut r)? as usize;
    let mut hbuf = vec![0u8; hlen];
    r.read_exact(&mut hbuf)?;
    let header: Header = serde_json::from_slice(&hbuf).map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .descriptor
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut blobs = HashMap::new();
    for _ in 0..header.blobs {
        let nlen = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; nlen];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        match precision {
            Precision::F64 => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f64::from_le_bytes(b));
                }
            }
            Precision::F32 => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    data.push(f32::from_le_bytes(b) as f64);
                }
            }
        }
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        blobs.insert(name, t);
    }

    let desc = header.descriptor;
    let mut take = |name: String| blobs.remove(&name).ok_or(CheckpointError::MissingBlob(name));
    let n_conv = desc.conv_widths().len();
    let mut convs = Vec::with_capacity(n_conv);
    let conv_blocks = desc.blocks.iter().filter_map(|b| match b {
        super::Block::Conv { stride, pad, bias, .. } => Some((*stride, *pad, *bias)),
        _ => None,
    });
    for (l, (stride, pad, has_bias)) in conv_blocks.enumerate() {
        convs.push(ConvUnit {
            weight: take(ParamRole::ConvWeight(l).name())?,
            bias: if has_bias {
                Some(take(ParamRole::ConvBias(l).name())?)
            } else {
                None
            },
            gamma: take(ParamRole::BnGamma(l).name())?,
            beta: take(ParamRole::BnBeta(l).name())?,
            running_mean: take(format!("conv{l}.bn.running_mean"))?.into_data(),
            running_var: take(format!("conv{l}.bn.running_var"))?.into_data(),
            stride,
            pad,
        });
    }
    let hw = take(ParamRole::HeadWeight.name())?;
    let hb = take(ParamRole::HeadBias.name())?;
    let model = Model::from_parts(desc, convs, hw, hb)?;
    let mask = header
        .mask_rle
        .map(|runs| ChannelMask::from_rle(model.registry(), &runs))
        .transpose()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    Ok(Checkpoint { model, mask })
}

pub fn save(
    path: &Path,
    model: &Model,
    mask: Option<&ChannelMask>,
    precision: Precision,
) -> Result<(), CheckpointError> {
    let f = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(f);
    write(&mut w, model, mask, precision)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let f = std::fs::File::open(path)?;
    read(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{tiny_descriptor, Block};

    #[test]
    fn f64_roundtrip_is_exact() {
        let mut desc = tiny_descriptor([1, 8, 8], 4);
        if let Block::Conv { bias, .. } = &mut desc.blocks[0] {
            *bias = true;
        }
        let mut model = Model::build(&desc, 3).unwrap();
        model.conv_units_mut()[1].running_mean[2] = 0.75;
        let mask = ChannelMask::from_bits(model.registry(), (0..24).map(|i| i % 3 != 0).collect()).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &model, Some(&mask), Precision::F64).unwrap();
        let ck = read(buf.as_slice()).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.mask, Some(mask));
    }

    #[test]
    fn f32_roundtrip_is_close() {
        let model = Model::build(&tiny_descriptor([1, 8, 8], 4), 3).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &model, None, Precision::F32).unwrap();
        let ck = read(buf.as_slice()).unwrap();
        let (a, b) = (ck.model.param(ParamRole::ConvWeight(1)), model.param(ParamRole::ConvWeight(1)));
        assert!(a.max_abs_diff(b) < 1e-6);
        assert!(ck.mask.is_none());
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(read(&b"NOTACKPT\x01\0\0\0"[..]), Err(CheckpointError::Magic)));
        let model = Model::build(&tiny_descriptor([1, 8, 8], 4), 3).unwrap();
        let mut buf = Vec::new();
        write(&mut buf, &model, None, Precision::F64).unwrap();
        buf.truncate(buf.len() - 5);
        assert!(matches!(read(buf.as_slice()), Err(CheckpointError::Io(_))));
    }
}
