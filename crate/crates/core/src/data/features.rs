//! Feature files: `"GASL"`, version `u16 = 1`, `T: u32`, `D: u32`, then
//! `T·D` little-endian `f32` values in row-major order. All integers are
//! little-endian.

use std::path::Path;

use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"GASL";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4 + 4;

/// A clip of `frames x dim` features stored at 32-bit precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    values: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("bad magic bytes {0:?}, expected \"GASL\"")]
    BadMagic([u8; 4]),
    #[error("unsupported feature file version {0}")]
    BadVersion(u16),
    #[error("truncated feature file: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("feature file has {0} unexpected trailing bytes")]
    Trailing(usize),
    #[error("non-finite feature value at index {0}")]
    NonFinite(usize),
    #[error("{values} values do not fill {frames} x {dim}")]
    Shape {
        frames: usize,
        dim: usize,
        values: usize,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, values: Vec<f32>) -> Result<Self, FeatureError> {
        if values.len() != frames * dim {
            return Err(FeatureError::Shape {
                frames,
                dim,
                values: values.len(),
            });
        }
        Ok(Self {
            frames,
            dim,
            values,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(
            self.frames,
            self.dim,
            self.values.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, FeatureError> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite(i));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.values.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < HEADER_LEN {
            return Err(FeatureError::Truncated {
                expected: HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if &magic != MAGIC {
            return Err(FeatureError::BadMagic(magic));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != VERSION {
            return Err(FeatureError::BadVersion(version));
        }
        let frames = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + frames * dim * 4;
        if bytes.len() < expected {
            return Err(FeatureError::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(FeatureError::Trailing(bytes.len() - expected));
        }
        let values = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(frames, dim, values)
    }
}

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<(), FeatureError> {
    std::fs::write(path, seq.to_bytes()?)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, FeatureError> {
    FeatureSequence::from_bytes(&std::fs::read(path)?)
}
