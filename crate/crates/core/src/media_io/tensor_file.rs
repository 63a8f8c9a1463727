//! Self-describing tensor container: a one-line JSON header
//! `{"dtype":"f32","shape":[..]}`, a newline, then the raw little-endian
//! row-major payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MediaError;
use crate::numerics::{DType, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorBlob {
    shape: Vec<usize>,
    dtype: DType,
    data: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dtype: DType,
    shape: Vec<usize>,
}

fn check_shape(shape: &[usize]) -> Result<(), MediaError> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(MediaError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl TensorBlob {
    pub fn new(shape: Vec<usize>, dtype: DType, data: Vec<u8>) -> Result<Self, MediaError> {
        check_shape(&shape)?;
        let expected = shape.iter().product::<usize>() * dtype.width();
        if data.len() < expected {
            return Err(MediaError::TruncatedPayload { expected, actual: data.len() });
        }
        if data.len() > expected {
            return Err(MediaError::TrailingBytes { expected, actual: data.len() });
        }
        Ok(Self { shape, dtype, data })
    }

    pub fn from_tensor<F: Real>(t: &Tensor<F>) -> Result<Self, MediaError> {
        let mut data = Vec::with_capacity(t.numel() * F::DTYPE.width());
        for &v in t.data() {
            v.write_le(&mut data);
        }
        // Scalars are stored as one-element vectors.
        let shape = if t.shape().is_empty() { vec![1] } else { t.shape().to_vec() };
        Self::new(shape, F::DTYPE, data)
    }

    /// Decodes the payload, converting between `f32` and `f64` when the
    /// stored dtype differs from `F`.
    pub fn to_tensor<F: Real>(&self) -> Tensor<F> {
        let w = self.dtype.width();
        let values: Vec<F> = self
            .data
            .chunks_exact(w)
            .map(|c| match self.dtype {
                DType::F32 => F::lit(f32::read_le(c) as f64),
                DType::F64 => F::lit(f64::read_le(c)),
            })
            .collect();
        Tensor::new(self.shape.clone(), values).expect("validated at construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn payload(&self) -> &[u8] {
        &self.data
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_string(&Header { dtype: self.dtype, shape: self.shape.clone() })
            .expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 1 + self.data.len());
        out.extend_from_slice(header.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MediaError> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| MediaError::CorruptHeader("missing header terminator".into()))?;
        let text = std::str::from_utf8(&bytes[..nl]).map_err(|e| MediaError::CorruptHeader(e.to_string()))?;
        let header: Header = serde_json::from_str(text).map_err(|e| MediaError::CorruptHeader(e.to_string()))?;
        check_shape(&header.shape).map_err(|_| MediaError::CorruptHeader(format!("bad shape {:?}", header.shape)))?;
        Self::new(header.shape, header.dtype, bytes[nl + 1..].to_vec())
    }
}

pub fn write_tensor(blob: &TensorBlob, path: impl AsRef<Path>) -> Result<(), MediaError> {
    let path = path.as_ref();
    fs::write(path, blob.encode()).map_err(|e| MediaError::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorBlob, MediaError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MediaError::io(path, e))?;
    TensorBlob::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_f32_round_trip() {
        let t = Tensor::<f32>::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let blob = TensorBlob::from_tensor(&t).unwrap();
        let bytes = blob.encode();
        assert!(bytes.starts_with(b"{\"dtype\":\"f32\",\"shape\":[2,2]}\n"));
        let back = TensorBlob::decode(&bytes).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.to_tensor::<f32>(), t);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let t = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64);
        let mut bytes = TensorBlob::from_tensor(&t).unwrap().encode();
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(TensorBlob::decode(&bytes), Err(MediaError::TruncatedPayload { .. })));
    }

    #[test]
    fn corrupt_header_is_detected() {
        assert!(matches!(TensorBlob::decode(b"{\"dtype\":\"f16\",\"shape\":[1]}\n\0\0"), Err(MediaError::CorruptHeader(_))));
        assert!(matches!(TensorBlob::decode(b"no newline"), Err(MediaError::CorruptHeader(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::from_fn(&[4, 7, 7], |i| (i as f64 * 0.731).sin());
        let blob = TensorBlob::from_tensor(&t).unwrap();
        let path = dir.path().join("x.bin");
        write_tensor(&blob, &path).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back, blob);
        assert_eq!(back.to_tensor::<f64>(), t);
    }

    proptest! {
        #[test]
        fn encode_decode_is_byte_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            wide in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let dtype = if wide { DType::F64 } else { DType::F32 };
            let mut state = seed;
            let data: Vec<u8> = (0..n * dtype.width())
                .map(|_| {
                    state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    (state >> 56) as u8
                })
                .collect();
            let blob = TensorBlob::new(shape, dtype, data).unwrap();
            let bytes = blob.encode();
            let back = TensorBlob::decode(&bytes).unwrap();
            prop_assert_eq!(&back, &blob);
            prop_assert_eq!(back.encode(), bytes);
        }
    }
}
