//! `SMB1` binary container: a JSON header plus named `f64` tensors.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        4 bytes   "SMB1"
//! version      u32       1
//! header_len   u64
//! header       header_len bytes, UTF-8 JSON
//! count        u32       number of tensors
//! per tensor, in name order:
//!   name_len   u32
//!   name       name_len bytes, UTF-8
//!   length     u64       element count
//!   ndim       u32
//!   dims       ndim × u64
//!   dtype      u8        1 = f64
//!   payload    length × 8 bytes, IEEE-754 binary64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"SMB1";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not an SMB1 container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed container: {0}")]
    Malformed(String),
}

/// Header JSON and tensors as read from or written to a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: String,
    pub tensors: ParamStore,
}

impl Container {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ContainerError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.header.len() as u64).to_le_bytes())?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in self.tensors.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.len() as u64).to_le_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            w.write_all(&[DTYPE_F64])?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Container, ContainerError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ContainerError::UnsupportedVersion(version));
        }
        let header_len = read_len(&mut r, "header")?;
        let header = String::from_utf8(read_bytes(&mut r, header_len)?)
            .map_err(|_| ContainerError::Malformed("header is not UTF-8".into()))?;
        let count = read_u32(&mut r)?;
        let mut tensors = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(read_bytes(&mut r, name_len)?)
                .map_err(|_| ContainerError::Malformed("tensor name is not UTF-8".into()))?;
            let length = read_len(&mut r, "tensor")?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(read_len(&mut r, "dimension")?);
            }
            let mut dtype = [0u8];
            r.read_exact(&mut dtype)?;
            if dtype[0] != DTYPE_F64 {
                return Err(ContainerError::Malformed(format!("unknown dtype {}", dtype[0])));
            }
            let bytes = read_bytes(&mut r, length.checked_mul(8).ok_or_else(|| {
                ContainerError::Malformed("tensor length overflow".into())
            })?)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data)
                .map_err(|e| ContainerError::Malformed(format!("tensor {name}: {e}")))?;
            if tensors.get(&name).is_some() {
                return Err(ContainerError::Malformed(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, t);
        }
        Ok(Container { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ContainerError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Container, ContainerError> {
        let bytes = std::fs::read(path)?;
        Container::read_from(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize, ContainerError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    usize::try_from(u64::from_le_bytes(b))
        .map_err(|_| ContainerError::Malformed(format!("{what} length does not fit in memory")))
}

fn read_bytes<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>, ContainerError> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(ContainerError::Malformed("unexpected end of data".into()));
    }
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut tensors = ParamStore::new();
        tensors.insert("b", Tensor::vector(vec![1.5, -0.0]));
        tensors.insert("a.w", Tensor::new(vec![2, 1], vec![f64::MIN_POSITIVE, 3.0]).unwrap());
        Container {
            header: r#"{"model_kind":"retrieval"}"#.into(),
            tensors,
        }
    }

    #[test]
    fn layout_is_bit_exact() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"SMB1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(&bytes[16..16 + hlen], br#"{"model_kind":"retrieval"}"#);
        let mut off = 16 + hlen;
        assert_eq!(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 2);
        off += 4;
        // first tensor in name order is "a.w"
        assert_eq!(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), 3);
        assert_eq!(&bytes[off + 4..off + 7], b"a.w");
        off += 7;
        assert_eq!(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[off + 8..off + 12].try_into().unwrap()), 2);
        off += 12 + 16;
        assert_eq!(bytes[off], 1);
        assert_eq!(
            f64::from_le_bytes(bytes[off + 9..off + 17].try_into().unwrap()),
            3.0
        );
    }

    #[test]
    fn roundtrip_preserves_bits() {
        let c = sample();
        let back = Container::read_from(c.to_bytes().as_slice()).unwrap();
        assert_eq!(back.header, c.header);
        assert!(back.tensors.bit_identical(&c.tensors));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(Container::read_from(&b"NOPE"[..]), Err(ContainerError::BadMagic)));
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Container::read_from(bytes.as_slice()),
            Err(ContainerError::UnsupportedVersion(9))
        ));
        let bytes = sample().to_bytes();
        assert!(Container::read_from(&bytes[..bytes.len() - 3]).is_err());
    }
}
