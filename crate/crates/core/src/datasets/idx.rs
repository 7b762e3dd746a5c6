//! IDX binary tensors: two zero bytes, a dtype byte, a rank byte, big-endian u32 sizes,
//! then a row-major big-endian payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum IdxDtype {
    U8,
    I8,
    I16,
    I32,
    F32,
    F64,
}

impl IdxDtype {
    pub fn code(self) -> u8 {
        match self {
            IdxDtype::U8 => 0x08,
            IdxDtype::I8 => 0x09,
            IdxDtype::I16 => 0x0B,
            IdxDtype::I32 => 0x0C,
            IdxDtype::F32 => 0x0D,
            IdxDtype::F64 => 0x0E,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0x08 => IdxDtype::U8,
            0x09 => IdxDtype::I8,
            0x0B => IdxDtype::I16,
            0x0C => IdxDtype::I32,
            0x0D => IdxDtype::F32,
            0x0E => IdxDtype::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            IdxDtype::U8 | IdxDtype::I8 => 1,
            IdxDtype::I16 => 2,
            IdxDtype::I32 | IdxDtype::F32 => 4,
            IdxDtype::F64 => 8,
        }
    }
}

/// Decoded IDX tensor. Unsigned-byte payloads are scaled to [0, 1] by 1/255; every
/// other dtype keeps its raw value.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxTensor {
    pub dtype: IdxDtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    if bytes.len() < 4 {
        return Err(parse_err(bytes.len(), format!("header needs 4 bytes, got {}", bytes.len())));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(parse_err(0, format!("bad magic {:02x} {:02x}, expected 00 00", bytes[0], bytes[1])));
    }
    let dtype = IdxDtype::from_code(bytes[2])
        .ok_or_else(|| parse_err(2, format!("unsupported dtype 0x{:02x}", bytes[2])))?;
    let rank = bytes[3] as usize;
    let header_len = 4 + 4 * rank;
    if bytes.len() < header_len {
        return Err(parse_err(
            bytes.len(),
            format!("truncated header: rank {rank} needs {header_len} bytes, got {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| parse_err(4, "declared shape overflows"))?;
    let payload_len = count
        .checked_mul(dtype.size())
        .ok_or_else(|| parse_err(4, "declared shape overflows"))?;
    let payload = &bytes[header_len..];
    if payload.len() < payload_len {
        return Err(parse_err(
            bytes.len(),
            format!(
                "truncated payload: shape {dims:?} expects {payload_len} bytes, got {}",
                payload.len()
            ),
        ));
    }
    if payload.len() > payload_len {
        return Err(parse_err(
            header_len + payload_len,
            format!("{} trailing bytes after payload", payload.len() - payload_len),
        ));
    }
    let data = payload
        .chunks_exact(dtype.size())
        .map(|c| match dtype {
            IdxDtype::U8 => c[0] as f64 / 255.0,
            IdxDtype::I8 => c[0] as i8 as f64,
            IdxDtype::I16 => i16::from_be_bytes([c[0], c[1]]) as f64,
            IdxDtype::I32 => i32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxDtype::F32 => f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64,
            IdxDtype::F64 => f64::from_be_bytes(c.try_into().expect("8-byte chunk")),
        })
        .collect();
    Ok(IdxTensor { dtype, dims, data })
}

/// Inverse of [`parse_idx`]; unsigned-byte values are mapped back with `round(v·255)`.
pub fn serialize_idx(t: &IdxTensor) -> Result<Vec<u8>> {
    if t.dims.len() > 255 {
        return Err(Error::invalid("IDX rank is limited to 255"));
    }
    if t.dims.iter().product::<usize>() != t.data.len() {
        return Err(Error::invalid("IDX data length does not match dims"));
    }
    let mut out = vec![0, 0, t.dtype.code(), t.dims.len() as u8];
    for &d in &t.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    for &v in &t.data {
        match t.dtype {
            IdxDtype::U8 => out.push((v * 255.0).round().clamp(0.0, 255.0) as u8),
            IdxDtype::I8 => out.push(v as i8 as u8),
            IdxDtype::I16 => out.extend_from_slice(&(v as i16).to_be_bytes()),
            IdxDtype::I32 => out.extend_from_slice(&(v as i32).to_be_bytes()),
            IdxDtype::F32 => out.extend_from_slice(&(v as f32).to_be_bytes()),
            IdxDtype::F64 => out.extend_from_slice(&v.to_be_bytes()),
        }
    }
    Ok(out)
}

pub fn read_idx_file(path: &Path) -> Result<IdxTensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_vector() {
        let t = parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 0, 128, 255]).unwrap();
        assert_eq!(t.dims, vec![3]);
        assert_eq!(t.data, vec![0.0, 128.0 / 255.0, 1.0]);
    }

    #[test]
    fn malformed_headers() {
        let cases: [(&[u8], usize); 6] = [
            (&[1, 0, 8, 1, 0, 0, 0, 1, 5], 0),
            (&[0, 7, 8, 1, 0, 0, 0, 1, 5], 0),
            (&[0, 0, 0x0A, 1, 0, 0, 0, 1, 5], 2),
            (&[0, 0, 8], 3),
            (&[0, 0, 8, 2, 0, 0, 0], 7),
            (&[0, 0, 8, 1, 0, 0, 0, 1, 5, 6], 9),
        ];
        for (bytes, offset) in cases {
            match parse_idx(bytes) {
                Err(Error::Parse { offset: o, .. }) => assert_eq!(o, offset, "{bytes:?}"),
                other => panic!("{bytes:?} gave {other:?}"),
            }
        }
    }

    #[test]
    fn truncated_payload_names_expected_length() {
        let bytes = [0, 0, 8, 2, 0, 0, 0, 2, 0, 0, 0, 3, 1, 2, 3, 4, 5];
        let err = parse_idx(&bytes).unwrap_err();
        assert!(err.to_string().contains("expects 6 bytes"), "{err}");
    }

    #[test]
    fn multi_byte_dtypes_round_trip() {
        for (dtype, data) in [
            (IdxDtype::I8, vec![-3.0, 0.0, 7.0, -128.0]),
            (IdxDtype::I16, vec![-300.0, 12.0, 32767.0, 1.0]),
            (IdxDtype::I32, vec![-70000.0, 5.0, 1.0, 0.0]),
            (IdxDtype::F32, vec![0.25, -1.5, 3.0e7, 1.0e-3_f32 as f64]),
            (IdxDtype::F64, vec![0.1, -2.0, 1e300, 3.25]),
        ] {
            let t = IdxTensor { dtype, dims: vec![2, 2], data };
            let bytes = serialize_idx(&t).unwrap();
            assert_eq!(parse_idx(&bytes).unwrap(), t);
            assert_eq!(serialize_idx(&parse_idx(&bytes).unwrap()).unwrap(), bytes);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn integer_tensors_round_trip_byte_for_byte(
                code in prop::sample::select(vec![0x08u8, 0x09, 0x0B, 0x0C]),
                dims in prop::collection::vec(0u32..5, 0..4),
                seed in any::<u64>(),
            ) {
                use rand::{RngCore, SeedableRng};
                let dtype = IdxDtype::from_code(code).unwrap();
                let count: usize = dims.iter().map(|&d| d as usize).product();
                let mut bytes = vec![0, 0, code, dims.len() as u8];
                for d in &dims {
                    bytes.extend_from_slice(&d.to_be_bytes());
                }
                let mut payload = vec![0u8; count * dtype.size()];
                rand_chacha::ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut payload);
                bytes.extend_from_slice(&payload);
                let t = parse_idx(&bytes).unwrap();
                prop_assert_eq!(t.data.len(), count);
                prop_assert_eq!(serialize_idx(&t).unwrap(), bytes);
            }

            #[test]
            fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
                if let Err(e) = parse_idx(&bytes) {
                    let structured = matches!(e, Error::Parse { .. });
                    prop_assert!(structured, "{}", e);
                }
            }
        }
    }
}
