//! Dense f32 tensors and the `FT32` on-disk format.
//!
//! Layout: magic `FT32`, `u32` LE rank, `rank × u64` LE extents, then the
//! row-major `f32` LE payload. No padding, no compression.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"FT32";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{path}: bad magic {found:?}, expected \"FT32\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: header shape {shape:?} needs {expected} values, payload holds {found}")]
    LengthMismatch {
        path: PathBuf,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("{path}: non-finite value at flat index {index}")]
    NonFinite { path: PathBuf, index: usize },
    #[error("{path}: truncated header")]
    TruncatedHeader { path: PathBuf },
    #[error("shape {shape:?} does not match data length {len}")]
    Shape { shape: Vec<usize>, len: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Shape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn from_array2(a: &Array2<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn from_array2_f64(a: &Array2<f64>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn from_array3(a: &Array3<f32>) -> Self {
        Self {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array2(&self) -> Option<Array2<f32>> {
        match self.shape[..] {
            [r, c] => Array2::from_shape_vec((r, c), self.data.clone()).ok(),
            _ => None,
        }
    }

    pub fn to_array2_f64(&self) -> Option<Array2<f64>> {
        match self.shape[..] {
            [r, c] => {
                Array2::from_shape_vec((r, c), self.data.iter().map(|&v| v as f64).collect()).ok()
            }
            _ => None,
        }
    }

    pub fn to_array3(&self) -> Option<Array3<f32>> {
        match self.shape[..] {
            [a, b, c] => Array3::from_shape_vec((a, b, c), self.data.clone()).ok(),
            _ => None,
        }
    }

    /// Serializes into the FT32 byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.shape.len() + 4 * self.data.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &e in &self.shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses the FT32 byte layout. `path` is only used for error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self, TensorError> {
        let truncated = || TensorError::TruncatedHeader {
            path: path.to_path_buf(),
        };
        if bytes.len() < 8 {
            if bytes.len() >= 4 && bytes[..4] != MAGIC {
                return Err(TensorError::BadMagic {
                    path: path.to_path_buf(),
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(truncated());
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(TensorError::BadMagic {
                path: path.to_path_buf(),
                found: magic,
            });
        }
        let ndim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header_len = 8 + 8 * ndim;
        if bytes.len() < header_len {
            return Err(truncated());
        }
        let shape: Vec<usize> = (0..ndim)
            .map(|k| {
                let off = 8 + 8 * k;
                u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()) as usize
            })
            .collect();
        let payload = &bytes[header_len..];
        let expected: usize = shape.iter().product();
        if payload.len() % 4 != 0 || payload.len() / 4 != expected {
            return Err(TensorError::LengthMismatch {
                path: path.to_path_buf(),
                shape,
                expected,
                found: payload.len() / 4,
            });
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                path: path.to_path_buf(),
                index,
            });
        }
        Ok(Self { shape, data })
    }
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let path = path.as_ref();
    let io_err = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err)?;
    Tensor::from_bytes(&bytes, path)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor) -> Result<(), TensorError> {
    let path = path.as_ref();
    if let Some(index) = tensor.first_non_finite() {
        return Err(TensorError::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    let io_err = |source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&tensor.to_bytes()).map_err(io_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_small() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ft32");
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f32).collect()).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ft32");
        let mut bytes = Tensor::zeros(vec![2]).to_bytes();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TensorError::BadMagic { found, .. }) if &found == b"XXXX"
        ));
    }

    #[test]
    fn length_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ft32");
        let mut bytes = Tensor::zeros(vec![2, 3]).to_bytes();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TensorError::LengthMismatch { expected: 6, found: 5, .. })
        ));
    }

    #[test]
    fn non_finite_rejected_both_ways() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ft32");
        let t = Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(
            write_tensor(&path, &t),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        fs::write(&path, t.to_bytes()).unwrap();
        assert!(matches!(
            read_tensor(&path),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn header_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"FT32");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..16], &1u64.to_le_bytes());
        assert_eq!(&b[16..24], &2u64.to_le_bytes());
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(&b[28..32], &(-2.5f32).to_le_bytes());
    }

    proptest! {
        #[test]
        fn roundtrip_is_identity(
            shape in prop::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let mut x = seed | 1;
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    x ^= x << 13;
                    x ^= x >> 7;
                    x ^= x << 17;
                    let v = f32::from_bits(x as u32);
                    if v.is_finite() { v } else { (x >> 40) as f32 }
                })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same_bits = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same_bits);
        }
    }
}
