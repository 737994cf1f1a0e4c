//! WNQT (float tensor) and WNQQ (quantized layer) file formats.
//!
//! WNQT layout, all integers little-endian:
//!
//! ```text
//! "WNQT" | version u8 = 1 | kind u8 (0 = FC, 1 = Conv) | ndims u8
//! dims: ndims x u64 | data: prod(dims) x f32, row-major
//! ```
//!
//! WNQQ layout:
//!
//! ```text
//! "WNQQ" | version u8 = 1 | kind u8 | K u8 | N u64 | M u64
//! N x { mav f32 | K x alpha f32 | K x plane (ceil(M/8) bytes, LSB-first) }
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write, so a
//! tensor read from a file always writes back to the identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{check_bits, plane_stride, LayerKind, QuantizedFilter, QuantizedLayer, WeightTensor};

pub const TENSOR_MAGIC: [u8; 4] = *b"WNQT";
pub const QUANT_MAGIC: [u8; 4] = *b"WNQQ";
pub const VERSION: u8 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated {
            needed: usize::MAX,
            available: self.buf.len(),
        })?;
        if end > self.buf.len() {
            return Err(Error::Truncated {
                needed: end,
                available: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<()> {
        let mut found = [0u8; 4];
        let avail = self.buf.len().min(4);
        found[..avail].copy_from_slice(&self.buf[..avail]);
        if found != expected {
            return Err(Error::BadMagic { expected, found });
        }
        self.pos = 4;
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            found => Err(Error::TrailingBytes { found }),
        }
    }
}

fn to_usize(v: u64) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::Config(format!("size {v} does not fit in memory")))
}

pub fn encode_tensor(t: &WeightTensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 8 * t.shape().len() + 4 * t.len());
    out.extend_from_slice(&TENSOR_MAGIC);
    out.push(VERSION);
    out.push(t.kind().as_byte());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_tensor(buf: &[u8]) -> Result<WeightTensor> {
    let mut r = Reader::new(buf);
    r.magic(TENSOR_MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = LayerKind::from_byte(r.u8()?)?;
    let ndims = r.u8()? as usize;
    if ndims != kind.expected_dims() {
        return Err(Error::DimCount {
            kind: kind.name(),
            expected: kind.expected_dims(),
            found: ndims,
        });
    }
    let mut shape = Vec::with_capacity(ndims);
    for _ in 0..ndims {
        shape.push(to_usize(r.u64()?)?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| Error::InvalidShape {
            shape: shape.clone(),
            reason: "element count overflows".into(),
        })?
        / 4;
    let bytes = r.take(count * 4)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    r.finish()?;
    WeightTensor::new(kind, shape, data)
}

pub fn encode_quantized(layer: &QuantizedLayer) -> Vec<u8> {
    let (k, m) = (layer.bits(), layer.filter_len());
    let per_filter = 4 + 4 * k + k * plane_stride(m);
    let mut out = Vec::with_capacity(24 + layer.filter_count() * per_filter);
    out.extend_from_slice(&QUANT_MAGIC);
    out.push(VERSION);
    out.push(layer.kind.as_byte());
    out.push(k as u8);
    out.extend_from_slice(&(layer.filter_count() as u64).to_le_bytes());
    out.extend_from_slice(&(m as u64).to_le_bytes());
    for f in &layer.filters {
        out.extend_from_slice(&(f.mav() as f32).to_le_bytes());
        for &a in f.alpha() {
            out.extend_from_slice(&(a as f32).to_le_bytes());
        }
        out.extend_from_slice(f.planes());
    }
    out
}

pub fn decode_quantized(buf: &[u8]) -> Result<QuantizedLayer> {
    let mut r = Reader::new(buf);
    r.magic(QUANT_MAGIC)?;
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = LayerKind::from_byte(r.u8()?)?;
    let k = r.u8()? as usize;
    check_bits(k)?;
    let n = to_usize(r.u64()?)?;
    let m = to_usize(r.u64()?)?;
    if n == 0 {
        return Err(Error::EmptyLayer);
    }
    if m == 0 {
        return Err(Error::EmptyFilter);
    }
    let stride = plane_stride(m);
    // Reject impossible sizes before allocating.
    let per_filter = 4 + 4 * k + k * stride;
    let needed = n.checked_mul(per_filter).and_then(|b| b.checked_add(r.pos));
    match needed {
        Some(needed) if needed <= buf.len() => {}
        _ => {
            return Err(Error::Truncated {
                needed: needed.unwrap_or(usize::MAX),
                available: buf.len(),
            })
        }
    }
    let mut filters = Vec::with_capacity(n);
    for _ in 0..n {
        let mav = r.f32()? as f64;
        let alpha = (0..k).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
        let planes = r.take(k * stride)?.to_vec();
        filters.push(QuantizedFilter::from_planes(alpha, planes, mav, m)?);
    }
    r.finish()?;
    QuantizedLayer::new(kind, filters)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<WeightTensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn write_tensor(t: &WeightTensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_quantized(path: impl AsRef<Path>) -> Result<QuantizedLayer> {
    decode_quantized(&fs::read(path)?)
}

pub fn write_quantized(layer: &QuantizedLayer, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_quantized(layer))?;
    Ok(())
}
