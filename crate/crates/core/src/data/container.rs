//! `.ten` tensor container: magic `TEN1`, `u8` dtype code, `u8` rank,
//! `rank` little-endian `u64` dims, then the little-endian row-major
//! payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 4] = b"TEN1";

#[derive(Clone, Debug, PartialEq)]
pub enum TenPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TenPayload {
    pub fn dtype(&self) -> DType {
        match self {
            TenPayload::F32(_) => DType::F32,
            TenPayload::F64(_) => DType::F64,
            TenPayload::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TenPayload::F32(v) => v.len(),
            TenPayload::F64(v) => v.len(),
            TenPayload::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TenFile {
    pub dims: Vec<usize>,
    pub payload: TenPayload,
}

impl TenFile {
    pub fn new(dims: Vec<usize>, payload: TenPayload) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::shape(
                "TenFile::new",
                format!("dims {dims:?} hold {n} values, payload has {}", payload.len()),
            ));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::shape("TenFile::new", format!("rank {} too large", dims.len())));
        }
        Ok(Self { dims, payload })
    }

    pub fn from_scalars<T: Scalar>(dims: Vec<usize>, data: &[T]) -> Result<Self> {
        let payload = match T::DTYPE {
            DType::F32 => TenPayload::F32(data.iter().map(|v| v.as_f64() as f32).collect()),
            _ => TenPayload::F64(data.iter().map(|v| v.as_f64()).collect()),
        };
        Self::new(dims, payload)
    }

    /// Payload converted to `T`; `f32` to `f64` widening is exact.
    pub fn to_scalars<T: Scalar>(&self) -> Result<Vec<T>> {
        match (&self.payload, T::DTYPE) {
            (TenPayload::F32(v), DType::F32) => Ok(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
            (TenPayload::F64(v), DType::F64) => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            (TenPayload::F32(v), _) => Ok(v.iter().map(|&x| T::from_f64_lossy(x as f64)).collect()),
            (TenPayload::F64(v), _) => Ok(v.iter().map(|&x| T::from_f64_lossy(x)).collect()),
            (TenPayload::U8(_), _) => Err(Error::CorruptContainer("expected a floating-point payload".into())),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.payload.dtype();
        let mut out = Vec::with_capacity(6 + 8 * self.dims.len() + self.payload.len() * dtype.size());
        out.extend_from_slice(MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            TenPayload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TenPayload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TenPayload::U8(v) => out.extend_from_slice(v),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |m: String| Error::CorruptContainer(m);
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| corrupt(format!("unknown dtype code {}", bytes[4])))?;
        let rank = bytes[5] as usize;
        let header = 6 + 8 * rank;
        if bytes.len() < header {
            return Err(corrupt(format!("truncated header for rank {rank}")));
        }
        let dims: Vec<usize> = bytes[6..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| corrupt(format!("dims {dims:?} overflow")))?;
        let body = &bytes[header..];
        let expected = n
            .checked_mul(dtype.size())
            .ok_or_else(|| corrupt(format!("dims {dims:?} overflow")))?;
        if body.len() != expected {
            return Err(corrupt(format!(
                "payload has {} bytes, dims {dims:?} need {expected}",
                body.len()
            )));
        }
        let payload = match dtype {
            DType::F32 => TenPayload::F32(
                body.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            DType::F64 => TenPayload::F64(
                body.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
            DType::U8 => TenPayload::U8(body.to_vec()),
        };
        Ok(Self { dims, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
