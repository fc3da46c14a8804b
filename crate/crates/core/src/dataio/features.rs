//! `AZF1` feature files.
//!
//! Layout: 4-byte magic, `n: u32`, `d: u32`, then `n * d` little-endian `f32`
//! values in row-major order.

use std::path::Path;

use super::{write_atomic, DataError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AZF1";
pub const HEADER_LEN: usize = 12;

pub fn encode_features(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, d) = t
        .dims2("feature file")
        .map_err(|e| DataError::Validation(e.to_string()))?;
    let too_big = |v: usize| u32::try_from(v).map_err(|_| DataError::Validation(format!("extent {v} exceeds u32")));
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&too_big(n)?.to_le_bytes());
    out.extend_from_slice(&too_big(d)?.to_le_bytes());
    for (i, v) in t.data().iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::Validation(format!("non-finite value at element {i}")));
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses an in-memory feature file; `origin` names it in errors.
pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Tensor<f32>> {
    let fmt = |offset: usize, message: String| DataError::Format {
        path: origin.to_owned(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(bytes.len(), format!("header needs {HEADER_LEN} bytes")));
    }
    if &bytes[..4] != MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let (n, d) = (word(4) as usize, word(8) as usize);
    let expected = (n as u64) * (d as u64) * 4;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if expected != found {
        return Err(DataError::Truncated {
            path: origin.to_owned(),
            expected,
            found,
        });
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(fmt(HEADER_LEN + 4 * i, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    Tensor::new(vec![n, d], data).map_err(|e| fmt(0, e.to_string()))
}

pub fn read_feature_file(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

pub fn write_feature_file(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let bytes = encode_features(t)?;
    write_atomic(path, &bytes).map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::new(vec![3, 4], (0..12).map(|i| i as f32 * 0.37 - 1.1).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.azf");
        write_feature_file(&p, &sample()).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back.shape(), &[3, 4]);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&sample()));
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 12 + 48);
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let mut b = encode_features(&sample()).unwrap();
        b[..4].copy_from_slice(b"XXXX");
        match decode_features(&b, "mem") {
            Err(DataError::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn short_payload_is_truncation() {
        let b = encode_features(&sample()).unwrap();
        assert!(matches!(
            decode_features(&b[..b.len() - 3], "mem"),
            Err(DataError::Truncated { expected: 48, found: 45, .. })
        ));
    }

    #[test]
    fn non_finite_value_names_its_offset() {
        let mut b = encode_features(&sample()).unwrap();
        b[12 + 8..12 + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        match decode_features(&b, "mem") {
            Err(DataError::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("{other:?}"),
        }
        let t = Tensor::new(vec![1, 1], vec![f32::INFINITY]).unwrap();
        assert!(encode_features(&t).is_err());
    }

    #[test]
    fn empty_matrix_round_trips() {
        let t = Tensor::<f32>::zeros(&[0, 5]);
        let back = decode_features(&encode_features(&t).unwrap(), "mem").unwrap();
        assert_eq!(back.shape(), &[0, 5]);
    }
}
