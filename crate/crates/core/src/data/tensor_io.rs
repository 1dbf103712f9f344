//! Binary tensor container.
//!
//! ```text
//! "SDD1" | u8 dtype (1 = f32, 2 = f64) | u8 rank | u16 reserved = 0
//!        | rank x u32 LE dims | row-major LE payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"SDD1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 1,
    F64 = 2,
}

impl Dtype {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            other => Err(Error::BadDtype(other)),
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Serialize into a byte buffer.
pub fn encode_tensor(tensor: &Tensor, dtype: Dtype) -> Vec<u8> {
    let rank = tensor.shape().len();
    let mut out = Vec::with_capacity(8 + 4 * rank + dtype.width() * tensor.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(dtype as u8);
    out.push(u8::try_from(rank).expect("rank fits in u8"));
    out.extend_from_slice(&0u16.to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&u32::try_from(d).expect("dim fits in u32").to_le_bytes());
    }
    match dtype {
        Dtype::F32 => tensor
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64 => tensor
            .data()
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Cursor over an in-memory file; every short read is a truncation.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(self.path.to_path_buf()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn path(&self) -> &Path {
        self.path
    }
}

pub(crate) fn decode_from(r: &mut Reader<'_>) -> Result<(Tensor, Dtype)> {
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::BadMagic(r.path().to_path_buf()));
    }
    let dtype = Dtype::from_code(r.take(1)?[0])?;
    let rank = r.take(1)?[0] as usize;
    let _reserved = r.take(2)?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n: usize = shape.iter().product();
    let payload = r.take(n * dtype.width())?;
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<(Tensor, Dtype)> {
    let mut r = Reader::new(bytes, path);
    let out = decode_from(&mut r)?;
    if !r.is_done() {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            reason: "trailing bytes after tensor payload".into(),
        });
    }
    Ok(out)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor, dtype: Dtype) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_tensor(tensor, dtype))?;
    Ok(())
}

/// Read a whole file; nothing is returned unless the file parses completely.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(Tensor, Dtype)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_tensor(&bytes, path)
}
