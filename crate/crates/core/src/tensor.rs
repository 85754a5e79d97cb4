//! Dense row-major f32 matrices and the on-disk tensor format.
//!
//! Layout of a tensor file, all fields little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "SALS"
//! 4       1           version (currently 1)
//! 5       1           dtype code (0 = f32)
//! 6       1           ndim
//! 7       1           reserved, must be 0
//! 8       8 * ndim    dims as u64
//! ...     4 * prod    payload, row-major f32
//! ```
//!
//! Readers reject bad magic, unknown versions, unknown dtypes, short files,
//! trailing bytes and non-finite payload values, each with a distinct error.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SalsError};

pub const TENSOR_MAGIC: [u8; 4] = *b"SALS";
pub const TENSOR_VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

/// Row-major f32 matrix. `data.len() == rows * cols` always holds.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    /// Builds a matrix from raw row-major data, checking length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        let expected = rows
            .checked_mul(cols)
            .ok_or_else(|| SalsError::InvalidInput {
                context: "DenseMatrix::new",
                reason: format!("shape {rows}x{cols} overflows"),
            })?;
        if data.len() != expected {
            return Err(SalsError::ShapeMismatch {
                context: "DenseMatrix::new",
                expected: format!("{rows}x{cols} = {expected} elements"),
                got: format!("{} elements", data.len()),
            });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(SalsError::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Max-abs difference; shapes must match.
    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f32> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SalsError::ShapeMismatch {
                context: "max_abs_diff",
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max))
    }

    /// Frobenius norm of the difference, accumulated in f64.
    pub fn frobenius_diff(&self, other: &DenseMatrix) -> Result<f64> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(SalsError::ShapeMismatch {
                context: "frobenius_diff",
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        let mut acc = 0.0f64;
        for (a, b) in self.data.iter().zip(&other.data) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
        Ok(acc.sqrt())
    }
}

/// Dot product with f64 accumulation. Panics on length mismatch in debug builds.
pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| *x as f64 * *y as f64)
        .sum()
}

pub fn write_tensor<P: AsRef<Path>>(path: P, m: &DenseMatrix) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, DTYPE_F32, 2, 0])?;
    w.write_all(&(m.rows as u64).to_le_bytes())?;
    w.write_all(&(m.cols as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<P: AsRef<Path>>(path: P) -> Result<DenseMatrix> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    read_tensor_bytes(&bytes)
}

/// Parses a tensor from an in-memory buffer.
pub fn read_tensor_bytes(bytes: &[u8]) -> Result<DenseMatrix> {
    if bytes.len() < 8 {
        return Err(SalsError::Truncated {
            expected: 8,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != TENSOR_MAGIC {
        return Err(SalsError::BadMagic { found: magic });
    }
    let version = bytes[4];
    if version != TENSOR_VERSION {
        return Err(SalsError::VersionMismatch {
            found: version,
            expected: TENSOR_VERSION,
        });
    }
    let dtype = bytes[5];
    if dtype != DTYPE_F32 {
        return Err(SalsError::UnsupportedDtype(dtype));
    }
    let ndim = bytes[6];
    if ndim != 2 {
        return Err(SalsError::BadNdim(ndim));
    }
    let header = 8 + 8 * ndim as u64;
    if (bytes.len() as u64) < header {
        return Err(SalsError::Truncated {
            expected: header,
            found: bytes.len() as u64,
        });
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let count = rows.checked_mul(cols).ok_or(SalsError::InvalidInput {
        context: "read_tensor",
        reason: format!("shape {rows}x{cols} overflows"),
    })?;
    let expected = header + 4 * count;
    if (bytes.len() as u64) < expected {
        return Err(SalsError::Truncated {
            expected,
            found: bytes.len() as u64,
        });
    }
    if (bytes.len() as u64) > expected {
        return Err(SalsError::TrailingData(bytes.len() as u64 - expected));
    }
    let mut data = Vec::with_capacity(count as usize);
    let payload = &bytes[header as usize..];
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    DenseMatrix::new(rows as usize, cols as usize, data)
}
