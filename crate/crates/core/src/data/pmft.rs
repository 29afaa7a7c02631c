//! `.pmft` tensor files.
//!
//! Layout: `"PMFT"`, version `0x01`, dtype byte (`0x01` f32, `0x02` f64),
//! ndim byte, `ndim` little-endian `u32` dims, then the row-major
//! little-endian payload. Nothing may follow the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: [u8; 4] = *b"PMFT";
pub const VERSION: u8 = 0x01;

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
}

pub fn encode<T: Element>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if !t.is_finite() {
        return Err(Error::NonFinite("pmft encode".into()));
    }
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("pmft", format!("{} dims exceed 255", t.ndim())));
    }
    let mut out = Vec::with_capacity(7 + 4 * t.ndim() + t.numel() * T::DTYPE.size());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE.code());
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("pmft", format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::Truncated { field })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

fn decode_payload<T: Element>(r: &mut Reader<'_>, shape: Vec<usize>) -> Result<Tensor<T>> {
    let numel: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let bytes = r.take(
        numel.checked_mul(size).ok_or(Error::Truncated { field: "payload" })?,
        "payload",
    )?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode_any(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| Error::BadMagic {
        found: bytes[..bytes.len().min(4)].to_vec(),
    })?;
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic.to_vec() });
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let code = r.take(1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or(Error::BadDtype(code))?;
    let ndim = r.take(1, "ndim")?[0] as usize;
    if ndim == 0 {
        return Err(Error::invalid("pmft", "ndim must be at least 1"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for index in 0..ndim {
        let d = u32::from_le_bytes(r.take(4, "dims")?.try_into().expect("4 bytes")) as usize;
        if d == 0 {
            return Err(Error::ZeroDim { index });
        }
        shape.push(d);
    }
    let t = match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(&mut r, shape)?),
        DType::F64 => AnyTensor::F64(decode_payload(&mut r, shape)?),
    };
    let rest = bytes.len() - r.pos;
    if rest != 0 {
        return Err(Error::TrailingBytes(rest));
    }
    Ok(t)
}

/// Decode, requiring the stored dtype to be `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let any = decode_any(bytes)?;
    let found = any.dtype();
    let mismatch = || Error::DtypeMismatch {
        expected: T::DTYPE.name(),
        found: found.name(),
    };
    // Route through `cast` only when the dtypes agree, which makes it a copy.
    match any {
        AnyTensor::F32(t) if T::DTYPE == DType::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == DType::F64 => Ok(t.cast()),
        _ => Err(mismatch()),
    }
}

pub fn write_pmft<T: Element>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_pmft<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn read_pmft_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    decode_any(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
