//! The GGT1 binary tensor format.
//!
//! Layout: magic `GGT1`, one dtype byte (0 = f32, 1 = f64), one rank byte,
//! `rank` little-endian u32 dims, then the row-major payload as little-endian
//! scalars.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

pub const MAGIC: [u8; 4] = *b"GGT1";

/// A decoded tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> u8 {
        match self {
            AnyTensor::F32(_) => 0,
            AnyTensor::F64(_) => 1,
        }
    }

    /// Converts to the requested element type. Widening f32 to f64 is exact.
    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encoded_len<T: Real>(t: &Tensor<T>) -> usize {
    6 + 4 * t.rank() + T::BYTES * t.len()
}

pub fn encode_into<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.rank() > u8::MAX as usize {
        return Err(Error::Format(format!("rank {} exceeds 255", t.rank())));
    }
    out.reserve(encoded_len(t));
    out.extend_from_slice(&MAGIC);
    out.push(T::DTYPE);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode<T: Real>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_into(t, &mut out)?;
    Ok(out)
}

fn read_payload<T: Real>(shape: Vec<usize>, bytes: &[u8]) -> Result<Tensor<T>> {
    let data = bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(format!("{e}")))
}

/// Decodes one tensor from the front of `bytes`, returning it and the number
/// of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(AnyTensor, usize)> {
    if bytes.len() < 6 {
        return Err(Error::Format(format!("truncated header ({} bytes)", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("truncated dims".into()));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::Format(format!("unknown dtype {other}"))),
    };
    let end = dims_end + width * numel(&shape);
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "payload needs {} bytes, {} available",
            end - dims_end,
            bytes.len() - dims_end
        )));
    }
    let payload = &bytes[dims_end..end];
    let t = match dtype {
        0 => AnyTensor::F32(read_payload(shape, payload)?),
        _ => AnyTensor::F64(read_payload(shape, payload)?),
    };
    Ok((t, end))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_f64([2, 1], &[1.0, -2.0]).unwrap();
        let b = encode(&t).unwrap();
        assert_eq!(&b[..4], b"GGT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"GGT2\x00\x00").is_err());
        assert!(decode(b"GGT1\x07\x00").is_err());
        let t = Tensor::<f64>::from_f64([3], &[1.0, 2.0, 3.0]).unwrap();
        let b = encode(&t).unwrap();
        assert!(decode(&b[..b.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(shape in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| libm::sin((seed as f64) * 1e-9 + i as f64) * 1e3).collect();
            let t = Tensor::<f64>::new(shape.clone(), data).unwrap();
            let back = decode(&encode(&t).unwrap()).unwrap();
            prop_assert_eq!(back, AnyTensor::F64(t.clone()));
            let t32: Tensor<f32> = t.cast();
            let back32 = decode(&encode(&t32).unwrap()).unwrap();
            prop_assert_eq!(back32, AnyTensor::F32(t32));
        }
    }
}
