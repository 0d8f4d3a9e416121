//! `RUNT` tensor files.
//!
//! Layout: magic `RUNT`, u8 version (1), u8 dtype code, u8 ndim, one
//! reserved zero byte, `ndim` little-endian u32 extents, then the row-major
//! little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"RUNT";
pub const VERSION: u8 = 1;
const HEADER: usize = 8;

/// Size in bytes of the encoded form of `t`.
pub fn encoded_len<T: Element>(t: &Tensor<T>) -> usize {
    HEADER + 4 * t.ndim() + t.len() * T::DTYPE.size()
}

pub fn encode<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::Format(format!(
            "{} axes do not fit the header",
            t.ndim()
        )));
    }
    out.reserve(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    out.push(0);
    for &e in t.shape() {
        let e = u32::try_from(e).map_err(|_| Error::Format(format!("extent {e} exceeds u32")))?;
        out.extend_from_slice(&e.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let truncated = || Error::Format("truncated tensor file".into());
    if bytes.len() < HEADER {
        return Err(truncated());
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[5])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "expected {:?} payload, file holds {dtype:?}",
            T::DTYPE
        )));
    }
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(Error::Format("reserved header byte is not zero".into()));
    }
    let mut pos = HEADER;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = bytes.get(pos..pos + 4).ok_or_else(truncated)?;
        shape.push(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize);
        pos += 4;
    }
    let n: usize = shape.iter().product();
    let size = dtype.size();
    let payload = bytes.get(pos..pos + n * size).ok_or_else(truncated)?;
    let data = payload.chunks_exact(size).map(T::read_le).collect();
    Ok((Tensor::from_vec(&shape, data)?, pos + n * size))
}

/// Like [`decode`], but accepts either float payload and converts it to `T`.
pub fn decode_float<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    match bytes.get(5).copied().and_then(DType::from_code) {
        Some(DType::F32) => decode::<f32>(bytes).map(|(t, n)| (t.cast(), n)),
        Some(DType::F64) => decode::<f64>(bytes).map(|(t, n)| (t.cast(), n)),
        _ => decode(bytes),
    }
}

pub fn write_tensor<T: Element>(t: &Tensor<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    encode(t, &mut buf)?;
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<T: Element>(path: &Path) -> Result<Tensor<T>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let (t, used) = decode(&buf)?;
    if used != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes",
            buf.len() - used
        )));
    }
    Ok(t)
}
