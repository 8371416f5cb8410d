//! `TNSR` binary tensor format.
//!
//! ```text
//! "TNSR" | u8 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 rank
//!        | rank × u64 LE extents | elements, LE
//! ```

use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;

/// A decoded tensor of either element type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding when the stored type differs.
    pub fn into_element<T: Element>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_into<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        format: "TNSR",
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
    match end {
        Some(end) => {
            let s = &bytes[*pos..end];
            *pos = end;
            Ok(s)
        }
        None => Err(format_err(*pos, format!("truncated while reading {what}"))),
    }
}

/// Decodes one tensor starting at `offset`; returns it with the offset just
/// past its last byte.
pub fn decode_at(bytes: &[u8], offset: usize) -> Result<(AnyTensor, usize)> {
    let mut pos = offset;
    let magic = take(bytes, &mut pos, 4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(offset, format!("bad magic bytes {magic:02x?}")));
    }
    let header = take(bytes, &mut pos, 3, "header")?;
    if header[0] != VERSION {
        return Err(format_err(offset + 4, format!("unsupported version {}", header[0])));
    }
    let dtype = DType::from_code(header[1]).ok_or_else(|| format_err(offset + 5, format!("unknown dtype code {}", header[1])))?;
    let rank = header[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = take(bytes, &mut pos, 8, "extent")?;
        let e = u64::from_le_bytes(raw.try_into().expect("8 bytes"));
        shape.push(usize::try_from(e).map_err(|_| format_err(pos - 8, "extent overflows usize"))?);
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| format_err(pos, "element count overflows"))?;
    let nbytes = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(pos, "payload size overflows"))?;
    let payload = take(bytes, &mut pos, nbytes, "elements")?;
    let tensor = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_parts(shape, payload.chunks_exact(4).map(f32::read_le).collect())),
        DType::F64 => AnyTensor::F64(Tensor::from_parts(shape, payload.chunks_exact(8).map(f64::read_le).collect())),
    };
    Ok((tensor, pos))
}

/// Decodes a buffer that holds exactly one tensor.
pub fn decode(bytes: &[u8]) -> Result<AnyTensor> {
    let (t, end) = decode_at(bytes, 0)?;
    if end != bytes.len() {
        return Err(format_err(end, "trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn save<T: Element>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::<f32>::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&t);
        let mut expected = b"TNSR".to_vec();
        expected.extend_from_slice(&[1, 0, 2]);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn corrupted_magic_names_offset() {
        let mut bytes = encode(&Tensor::<f64>::zeros(&[2]));
        bytes[1] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
        assert!(err.to_string().contains("offset 0"));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&Tensor::<f32>::zeros(&[3, 3]));
        let err = decode(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn scalar_round_trip() {
        let t = Tensor::scalar(3.25f64);
        assert_eq!(decode(&encode(&t)).unwrap(), AnyTensor::F64(t));
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(shape in prop::collection::vec(0usize..5, 0..4), seed in any::<u64>()) {
            let mut rng = crate::rng::RngStream::new(seed);
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|_| rng.normal() as f32).collect();
            let t = Tensor::new(&shape, data).unwrap();
            prop_assert_eq!(decode(&encode(&t)).unwrap(), AnyTensor::F32(t));
        }
    }
}
