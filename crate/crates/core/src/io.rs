//! ATNB tensor files and block-table JSON.
//!
//! Layout, all little-endian:
//!
//! | offset        | size      | field                              |
//! |---------------|-----------|------------------------------------|
//! | 0             | 4         | magic `ATNB`                       |
//! | 4             | 4         | version (`u32`, currently 1)       |
//! | 8             | 1         | dtype (1 = `f64`, 2 = boolean byte) |
//! | 9             | 4         | ndim (`u32`)                       |
//! | 13            | 8 * ndim  | dims (`u64` each)                  |
//! | 13 + 8 * ndim | payload   | row-major values                   |
//!
//! Boolean bytes must be 0 or 1, and the payload must end the file.

use std::fs;
use std::path::Path;

use crate::calibration::{BlockFixture, ForegroundMask, LatentTensor};
use crate::error::{invalid, Error, Result};
use crate::numkernel::Matrix;

pub const MAGIC: [u8; 4] = *b"ATNB";
pub const VERSION: u32 = 1;
pub const DTYPE_F64: u8 = 1;
pub const DTYPE_BOOL: u8 = 2;
const HEADER_FIXED: usize = 13;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    Bool(Vec<bool>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real(v) => v.len(),
            TensorData::Bool(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::Real(_) => DTYPE_F64,
            TensorData::Bool(_) => DTYPE_BOOL,
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::Real(_) => "f64",
            TensorData::Bool(_) => "bool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    data: TensorData,
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format { offset: offset as u64, message: message.into() }
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        if n != Some(data.len()) {
            return Err(Error::DimensionMismatch {
                context: "TensorFile::new",
                expected: format!("{} values for dims {dims:?}", n.map_or("overflowing".into(), |n| n.to_string())),
                found: format!("{}", data.len()),
            });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = match &self.data {
            TensorData::Real(v) => v.len() * 8,
            TensorData::Bool(v) => v.len(),
        };
        let mut out = Vec::with_capacity(HEADER_FIXED + 8 * self.dims.len() + payload);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.data {
            TensorData::Real(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::Bool(v) => out.extend(v.iter().map(|&b| u8::from(b))),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
            bytes.get(at..at + n).ok_or_else(|| {
                format_err(bytes.len().max(at), format!("truncated {what}: need {n} bytes at offset {at}, file has {}", bytes.len()))
            })
        };
        if take(0, 4, "magic")? != MAGIC {
            return Err(format_err(0, format!("bad magic {:?}, expected \"ATNB\"", String::from_utf8_lossy(&bytes[..4]))));
        }
        let version = u32::from_le_bytes(take(4, 4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let dtype = take(8, 1, "dtype")?[0];
        if dtype != DTYPE_F64 && dtype != DTYPE_BOOL {
            return Err(format_err(8, format!("unknown dtype code {dtype}")));
        }
        let ndim = u32::from_le_bytes(take(9, 4, "ndim")?.try_into().expect("4 bytes")) as usize;
        let dims_bytes = ndim
            .checked_mul(8)
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| format_err(bytes.len(), format!("truncated dims: {ndim} dims declared")))?;
        let raw_dims = take(HEADER_FIXED, dims_bytes, "dims")?;
        let mut dims = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for (i, chunk) in raw_dims.chunks_exact(8).enumerate() {
            let d = u64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            let at = HEADER_FIXED + 8 * i;
            let d = usize::try_from(d).map_err(|_| format_err(at, format!("dim {i} = {d} too large")))?;
            count = count.checked_mul(d).ok_or_else(|| format_err(at, "element count overflows"))?;
            dims.push(d);
        }
        let start = HEADER_FIXED + dims_bytes;
        let width = if dtype == DTYPE_F64 { 8 } else { 1 };
        let need = count.checked_mul(width).ok_or_else(|| format_err(start, "payload size overflows"))?;
        let have = bytes.len() - start;
        if have < need {
            return Err(format_err(
                bytes.len(),
                format!("truncated payload: expected {need} bytes from offset {start}, found {have}"),
            ));
        }
        if have > need {
            return Err(format_err(start + need, format!("{} trailing bytes after payload", have - need)));
        }
        let payload = &bytes[start..];
        let data = if dtype == DTYPE_F64 {
            TensorData::Real(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
        } else {
            let mut v = Vec::with_capacity(count);
            for (i, &b) in payload.iter().enumerate() {
                match b {
                    0 => v.push(false),
                    1 => v.push(true),
                    _ => return Err(format_err(start + i, format!("boolean byte {b} is not 0 or 1"))),
                }
            }
            TensorData::Bool(v)
        };
        Ok(Self { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Format { offset, message } => Error::Format { offset, message: format!("{}: {message}", path.display()) },
            other => other,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
    }

    pub fn from_matrix(m: &Matrix<f64>) -> Self {
        Self { dims: vec![m.rows(), m.cols()], data: TensorData::Real(m.data().to_vec()) }
    }

    pub fn from_latent(l: &LatentTensor<f64>) -> Self {
        Self { dims: l.dims().to_vec(), data: TensorData::Real(l.data().to_vec()) }
    }

    pub fn from_mask(m: &ForegroundMask) -> Self {
        Self { dims: m.dims().to_vec(), data: TensorData::Bool(m.data().to_vec()) }
    }

    fn real(&self, ndim: usize, what: &str) -> Result<&[f64]> {
        match &self.data {
            TensorData::Real(v) if self.dims.len() == ndim => Ok(v),
            TensorData::Real(_) => Err(invalid(format!("{what} needs {ndim} dims, file has {:?}", self.dims))),
            TensorData::Bool(_) => Err(invalid(format!("{what} needs f64 data, file holds booleans"))),
        }
    }

    pub fn to_matrix(&self) -> Result<Matrix<f64>> {
        let v = self.real(2, "matrix")?;
        Matrix::new(self.dims[0], self.dims[1], v.to_vec())
    }

    pub fn to_latent(&self) -> Result<LatentTensor<f64>> {
        let v = self.real(5, "latent")?;
        let d = &self.dims;
        LatentTensor::new([d[0], d[1], d[2], d[3], d[4]], v.to_vec())
    }

    pub fn to_mask(&self) -> Result<ForegroundMask> {
        match &self.data {
            TensorData::Bool(v) if self.dims.len() == 3 => {
                ForegroundMask::new([self.dims[0], self.dims[1], self.dims[2]], v.clone())
            }
            _ => Err(invalid(format!("mask needs a 3-dim boolean tensor, file has {} {:?}", self.data.dtype_name(), self.dims))),
        }
    }
}

/// Block indices from JSON: a plain array or a fixture object with `blocks`.
pub fn parse_block_indices(json: &str) -> Result<Vec<usize>> {
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| invalid(format!("block table: {e}")))?;
    if value.is_array() {
        let mut v: Vec<usize> = serde_json::from_value(value).map_err(|e| invalid(format!("block table: {e}")))?;
        let n = v.len();
        v.sort_unstable();
        v.dedup();
        if v.len() != n {
            return Err(invalid("block table repeats an index"));
        }
        Ok(v)
    } else {
        Ok(BlockFixture::parse(json)?.blocks)
    }
}
