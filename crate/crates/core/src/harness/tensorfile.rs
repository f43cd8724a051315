//! The `PADT` raw tensor format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PADT" | version: u16 = 1 | dtype: u8 (0 = f32, 1 = f64) | rank: u8 | dims: rank × u32 | payload
//! ```
//!
//! The payload is row-major and holds exactly `product(dims)` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use gradkit::{Element, Tensor};

use crate::error::{io_err, PadmError, Result};

pub const MAGIC: &[u8; 4] = b"PADT";
pub const VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Element types that have a `PADT` dtype code.
pub trait PadtElement: Element {
    const DTYPE: DType;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl PadtElement for f32 {
    const DTYPE: DType = DType::F32;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl PadtElement for f64 {
    const DTYPE: DType = DType::F64;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// A decoded tensor of either supported dtype.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Widens to f64; lossless for both dtypes.
    pub fn into_f64(self) -> Tensor<f64> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t,
        }
    }
}

pub fn encode<T: PadtElement>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(PadmError::Shape(format!("rank {} exceeds 255", t.rank())));
    }
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| PadmError::Shape(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.put(&mut out);
    }
    Ok(out)
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode_prefix(bytes: &[u8], origin: &Path) -> Result<(AnyTensor, usize)> {
    let bad = |detail: String| PadmError::Format {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing PADT magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| bad(format!("dtype code {}", bytes[6])))?;
    let rank = bytes[7] as usize;
    let header = 8 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header".into()));
    }
    let shape: Vec<usize> = bytes[8..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    let end = numel
        .checked_mul(dtype.size())
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| bad("payload size overflows".into()))?;
    if bytes.len() < end {
        return Err(bad(format!(
            "payload holds {} bytes, expected {}",
            bytes.len() - header,
            end - header
        )));
    }
    let payload = &bytes[header..end];
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_vec(
            shape,
            payload.chunks_exact(4).map(f32::take).collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::from_vec(
            shape,
            payload.chunks_exact(8).map(f64::take).collect(),
        )?),
    };
    Ok((tensor, end))
}

pub fn write_tensor<T: PadtElement>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let bytes = encode(t)?;
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let (t, used) = decode_prefix(&bytes, path)?;
    if used != bytes.len() {
        return Err(PadmError::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", bytes.len() - used),
        });
    }
    Ok(t)
}

pub fn read_f64(path: &Path) -> Result<Tensor<f64>> {
    read_tensor(path).map(AnyTensor::into_f64)
}
