//! Dense n-dimensional `f32` tensors and the on-disk tensor file format.
//!
//! Tensor files (also used for weight blobs) are laid out as:
//! `rank: u64 LE`, `rank x extent: u64 LE`, then `product(extents) x f32 LE`,
//! row-major.

use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

/// Upper bound on rank accepted when reading tensor headers.
pub const MAX_RANK: usize = 8;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("tensor rank must be at least 1")]
    EmptyShape,
    #[error("tensor extents must be positive, got {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("shape {shape:?} needs {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("tensor header is invalid: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Product of extents, `None` on overflow.
pub fn element_count(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.is_empty() {
        return Err(TensorError::EmptyShape);
    }
    if shape.contains(&0) {
        return Err(TensorError::ZeroExtent(shape.to_vec()));
    }
    element_count(shape).ok_or_else(|| TensorError::BadHeader(format!("shape {shape:?} overflows")))
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, TensorError> {
        let n = check_shape(&shape)?;
        Ok(Tensor {
            shape,
            data: vec![0.0; n],
        })
    }

    /// Builds a tensor whose shape is already known to be valid.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(element_count(&shape), Some(data.len()));
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Size of the raw `f32` payload in bytes.
    pub fn byte_len(&self) -> usize {
        self.data.len() * 4
    }

    /// Bitwise equality: distinguishes `-0.0` from `0.0` and compares NaN payloads.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.shape.len() as u64).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut body = Vec::with_capacity(self.byte_len());
        for v in &self.data {
            body.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&body)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, TensorError> {
        let rank = read_u64(&mut r)? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(TensorError::BadHeader(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = read_u64(&mut r)?;
            shape.push(usize::try_from(d).map_err(|_| TensorError::BadHeader(format!("extent {d}")))?);
        }
        let n = check_shape(&shape)?;
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| TensorError::BadHeader(format!("shape {shape:?} overflows")))?;
        let mut body = Vec::new();
        r.take(bytes as u64).read_to_end(&mut body)?;
        if body.len() != bytes {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: n,
                got: body.len() / 4,
            });
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Tensor { shape, data })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.rank() + self.byte_len());
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let f = std::fs::File::open(path)?;
        Tensor::read_from(io::BufReader::new(f))
    }
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
