//! DTF tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DTF1" | rank: u32 | dims: rank × u32 | dtype: u8 (0 = f32, 1 = f64) | data
//! ```
//!
//! Data is row-major. Writing a tensor at its native precision and reading it
//! back is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DTF1";

/// Serialize `t` with elements stored as `dtype`.
pub fn encode<T: Scalar>(t: &Tensor<T>, dtype: DType) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 4 * t.shape().len() + dtype.size() * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype.tag());
    match dtype {
        DType::F32 => {
            for v in t.data() {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        DType::F64 => {
            for v in t.data() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    out
}

/// Parse DTF bytes; `path` is only used to label errors.
pub fn decode<T: Scalar>(bytes: &[u8], path: &Path) -> Result<(Tensor<T>, DType)> {
    let fail = |offset: usize, reason: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason,
    };
    let mut pos = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if bytes.len() < pos + n {
            return Err(fail(
                pos,
                format!("truncated {what}: need {n} bytes, {} left", bytes.len() - pos),
            ));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    if take(4, "magic")? != MAGIC {
        return Err(fail(0, "bad magic, expected \"DTF1\"".into()));
    }
    let rank = u32::from_le_bytes(take(4, "rank")?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = u32::from_le_bytes(take(4, "dimension")?.try_into().unwrap()) as usize;
        if d == 0 {
            return Err(fail(8 + 4 * i, format!("dimension {i} is zero")));
        }
        shape.push(d);
    }
    let tag_at = 8 + 4 * rank;
    let tag = take(1, "dtype tag")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| fail(tag_at, format!("unknown dtype tag {tag}")))?;
    let n: usize = shape.iter().product();
    let data_at = tag_at + 1;
    let raw = take(n * dtype.size(), "data")?;
    if bytes.len() != data_at + n * dtype.size() {
        return Err(fail(
            data_at + n * dtype.size(),
            format!("{} trailing bytes", bytes.len() - data_at - n * dtype.size()),
        ));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>, dtype: DType) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(t, dtype))?;
    Ok(())
}

/// Write at the scalar's native precision.
pub fn write_native<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    write(path, t, T::DTYPE)
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Ok(decode(&bytes, path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::<f64>::from_f64(vec![2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t, DType::F32);
        assert_eq!(&b[..4], b"DTF1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(b[16], 0);
        assert_eq!(&b[17..21], &1.0f32.to_le_bytes());
        assert_eq!(&b[21..25], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 25);
    }

    #[test]
    fn reports_offset_of_corruption() {
        let t = Tensor::<f64>::zeros(vec![3]);
        let mut b = encode(&t, DType::F64);
        b[12] = 9;
        let err = decode::<f64>(&b, Path::new("m.dtf")).unwrap_err();
        match err {
            Error::Format { offset, ref path, .. } => {
                assert_eq!(offset, 12);
                assert_eq!(path, Path::new("m.dtf"));
            }
            e => panic!("unexpected {e}"),
        }
        let short = &encode(&t, DType::F64)[..20];
        assert!(matches!(decode::<f64>(short, Path::new("x")), Err(Error::Format { offset: 13, .. })));
        assert!(matches!(decode::<f64>(b"DTF2", Path::new("x")), Err(Error::Format { offset: 0, .. })));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t64 = Tensor::<f64>::randn(dims.clone(), 3.0, &mut rng);
            let (back, dt) = decode::<f64>(&encode(&t64, DType::F64), Path::new("p")).unwrap();
            prop_assert_eq!(dt, DType::F64);
            prop_assert!(back.data().iter().zip(t64.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let t32: Tensor<f32> = t64.cast();
            let back32 = decode::<f32>(&encode(&t32, DType::F32), Path::new("p")).unwrap().0;
            prop_assert!(back32.data().iter().zip(t32.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
