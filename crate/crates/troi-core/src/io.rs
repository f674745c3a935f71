//! Bit-exact tensor file format and the plain-text boxes file.
//!
//! Tensor file layout, all little-endian:
//!
//! ```text
//! magic   4 bytes ASCII "TROI"
//! version u32 = 1
//! dtype   u8 (1 = f32, 2 = f64)
//! rank    u8
//! dims    rank x u64
//! payload row-major scalars
//! ```
//!
//! Files round-trip bitwise. Boxes are one `x1 y1 x2 y2` line per proposal;
//! coordinates print with Rust's shortest round-trip float formatting, so
//! they re-read to identical bits as well.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Result, TroiError};
use crate::roi_align::RoiBox;
use crate::tensor::{Dtype, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"TROI";
pub const VERSION: u32 = 1;

/// A tensor of either supported dtype, as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> Dtype {
        match self {
            AnyTensor::F32(_) => Dtype::F32,
            AnyTensor::F64(_) => Dtype::F64,
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.dims(),
            AnyTensor::F64(t) => t.dims(),
        }
    }

    /// Convert to f64 regardless of stored dtype (exact for f32 sources).
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }

    /// Convert to f32 (lossy for f64 sources).
    pub fn into_f32(self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn write_tensor<T: Element>(path: &Path, tensor: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + tensor.numel() * T::DTYPE.size_bytes());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(T::DTYPE.code());
    buf.push(tensor.rank() as u8);
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    fs::write(path, &buf).map_err(|e| TroiError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).map_err(|e| TroiError::io(path, e))?;
    let bad = |reason: &str| TroiError::bad_file(path, reason);
    if bytes.len() < 10 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic, expected \"TROI\""));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let dtype =
        Dtype::from_code(bytes[8]).ok_or_else(|| bad(&format!("bad dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    if rank == 0 || rank > crate::tensor::MAX_RANK {
        return Err(bad(&format!("rank {rank} outside 1..=4")));
    }
    let header = 10 + rank * 8;
    if bytes.len() < header {
        return Err(bad("truncated dims"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 10 + i * 8;
        let d = u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap());
        if d == 0 || d > u32::MAX as u64 {
            return Err(bad(&format!("bad extent {d} in dims")));
        }
        dims.push(d as usize);
    }
    // hostile headers must error, not overflow
    let numel = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("dims product overflows"))?;
    let expect = numel
        .checked_mul(dtype.size_bytes())
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| bad("payload size overflows"))?;
    if bytes.len() != expect {
        return Err(bad(&format!(
            "payload length {} does not match dims {dims:?} ({} bytes expected)",
            bytes.len() - header,
            expect - header
        )));
    }
    let payload = &bytes[header..];
    match dtype {
        Dtype::F32 => {
            let data = payload.chunks_exact(4).map(f32::read_le).collect();
            Ok(AnyTensor::F32(
                Tensor::from_vec(&dims, data).map_err(|e| bad(&e.to_string()))?,
            ))
        }
        Dtype::F64 => {
            let data = payload.chunks_exact(8).map(f64::read_le).collect();
            Ok(AnyTensor::F64(
                Tensor::from_vec(&dims, data).map_err(|e| bad(&e.to_string()))?,
            ))
        }
    }
}

/// Write proposals as `x1 y1 x2 y2` lines.
pub fn write_boxes(path: &Path, boxes: &[RoiBox]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TroiError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for b in boxes {
        writeln!(w, "{} {} {} {}", b.x1, b.y1, b.x2, b.y2).map_err(|e| TroiError::io(path, e))?;
    }
    w.flush().map_err(|e| TroiError::io(path, e))
}

/// Read proposals from a boxes file; blank lines are skipped.
pub fn read_boxes(path: &Path) -> Result<Vec<RoiBox>> {
    let text = fs::read_to_string(path).map_err(|e| TroiError::io(path, e))?;
    let mut boxes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(TroiError::bad_file(
                path,
                format!(
                    "line {}: expected 4 fields, got {}",
                    lineno + 1,
                    fields.len()
                ),
            ));
        }
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields) {
            *v = f.parse().map_err(|_| {
                TroiError::bad_file(path, format!("line {}: bad number {f:?}", lineno + 1))
            })?;
        }
        let b = RoiBox::new(vals[0], vals[1], vals[2], vals[3])?;
        boxes.push(b);
    }
    Ok(boxes)
}
