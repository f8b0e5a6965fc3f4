//! Binary per-unit video feature files.
//!
//! Layout: magic `VFEA`, `u32` LE unit count `T`, `u32` LE dimension `d_v`,
//! then `T·d_v` little-endian `f32` values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"VFEA";
const HEADER_LEN: usize = 12;

pub fn decode_features(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let fail = |detail: String| Error::Format {
        path: origin.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(format!("bad magic {:?}", &bytes[..4])));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if t == 0 || d == 0 {
        return Err(fail(format!("empty feature matrix {t}x{d}")));
    }
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(format!("header {t}x{d} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(format!(
            "payload is {} bytes, header {t}x{d} needs {expected}",
            payload.len()
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(format!("non-finite value at unit {}, dim {}", i / d, i % d)));
        }
        data.push(f64::from(v));
    }
    Tensor::matrix(t, d, data)
}

pub fn encode_features(features: &Tensor) -> Result<Vec<u8>> {
    if features.ndim() != 2 {
        return Err(Error::dim(
            "encode_features",
            format!("expected a T×d_v matrix, got {:?}", features.shape()),
        ));
    }
    let (t, d) = (features.shape()[0], features.shape()[1]);
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * d);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for &v in features.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::Numerical(format!("feature value {v} is not representable as f32")));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    let bytes = encode_features(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Nearest-neighbour resampling over the unit axis: output row `i` is input
/// row `floor(i · T_in / t_units)`.
pub fn resample_units(features: &Tensor, t_units: usize) -> Tensor {
    let t_in = features.shape()[0];
    if t_in == t_units {
        return features.clone();
    }
    let d = features.last_dim();
    let mut data = Vec::with_capacity(t_units * d);
    for i in 0..t_units {
        data.extend_from_slice(features.row(i * t_in / t_units));
    }
    Tensor::matrix(t_units, d, data).expect("resampled shape")
}

/// Reads a feature file and resamples it to `t_units` rows.
pub fn load_features(path: &Path, t_units: usize) -> Result<Tensor> {
    Ok(resample_units(&read_features(path)?, t_units))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(t: usize, d: usize) -> Tensor {
        Tensor::matrix(t, d, (0..t * d).map(|i| i as f64 * 0.25 - 3.0).collect()).unwrap()
    }

    #[test]
    fn same_length_is_identity() {
        let f = sample(75, 3);
        assert_eq!(resample_units(&f, 75), f);
    }

    #[test]
    fn halving_picks_even_rows() {
        let f = sample(150, 2);
        let r = resample_units(&f, 75);
        for i in 0..75 {
            // floor(i * 150 / 75) = 2i
            assert_eq!(r.row(i), f.row(2 * i));
        }
    }

    #[test]
    fn rejects_bad_magic_truncation_and_nan() {
        let p = Path::new("x.vfea");
        let good = encode_features(&sample(4, 2)).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_features(&bad_magic, p), Err(Error::Format { .. })));
        assert!(matches!(decode_features(&good[..good.len() - 1], p), Err(Error::Format { .. })));
        assert!(matches!(decode_features(&good[..8], p), Err(Error::Format { .. })));
        let mut nan = good.clone();
        nan[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&nan, p), Err(Error::Format { .. })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vfea");
        let f = sample(5, 3);
        write_features(&path, &f).unwrap();
        assert_eq!(load_features(&path, 5).unwrap(), f);
        assert_eq!(load_features(&path, 10).unwrap().shape(), &[10, 3]);
    }

    proptest! {
        #[test]
        fn encode_of_decode_is_byte_identical(
            t in 1usize..6,
            d in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(FEATURE_MAGIC);
            bytes.extend_from_slice(&(t as u32).to_le_bytes());
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
            let mut x = seed;
            for _ in 0..t * d {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let v = ((x >> 40) as f32 / (1u64 << 24) as f32 - 0.5) * 100.0;
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            let decoded = resample_units(&decode_features(&bytes, Path::new("p")).unwrap(), t);
            prop_assert_eq!(encode_features(&decoded).unwrap(), bytes);
        }
    }
}
