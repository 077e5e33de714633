//! Binary tensor encoding shared by every checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic   4 bytes  "TNS1"
//! rank    u32
//! dims    rank × u64
//! data    product(dims) × f64, row-major
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};

use super::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"TNS1";
const MAX_RANK: u32 = 8;
const MAX_ELEMENTS: u64 = 1 << 28;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format("<tensor>", format!("bad magic {magic:?}")));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::format("<tensor>", format!("rank {rank} too large")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut total: u64 = 1;
    for _ in 0..rank {
        let d = read_u64(r)?;
        total = total.saturating_mul(d);
        shape.push(d as usize);
    }
    if total > MAX_ELEMENTS {
        return Err(Error::format("<tensor>", format!("{total} elements too large")));
    }
    let mut data = Vec::with_capacity(total as usize);
    let mut buf = [0u8; 8];
    for _ in 0..total {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::new(shape, data)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * t.len());
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Length-prefixed UTF-8 string.
pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::format("<string>", format!("length {len} too large")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::format("<string>", e.to_string()))
}

/// A header string plus named tensors, the container used by every
/// checkpoint and adapter file.
///
/// ```text
/// magic    8 bytes
/// header   u32 length + UTF-8
/// count    u32
/// entries  count × (u32 length + UTF-8 name, tensor)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(magic);
        write_str(&mut out, &self.header).expect("writing to a Vec cannot fail");
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            write_str(&mut out, name).expect("writing to a Vec cannot fail");
            write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], magic: &[u8; 8]) -> Result<Self> {
        let mut r = bytes;
        let mut m = [0u8; 8];
        r.read_exact(&mut m)?;
        if &m != magic {
            return Err(Error::format(
                "<archive>",
                format!("expected magic {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let header = read_str(&mut r)?;
        let count = read_u32(&mut r)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name = read_str(&mut r)?;
            entries.push((name, read_tensor(&mut r)?));
        }
        if !r.is_empty() {
            return Err(Error::format("<archive>", "trailing bytes"));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &std::path::Path, magic: &[u8; 8]) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic))?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, magic: &[u8; 8]) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, magic).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path.display().to_string(), message),
            other => other,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}
