//! Versioned binary container for named tensors.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "MMRPHBIN"
//! version    u32      currently 1
//! meta_len   u32      length of the metadata block
//! meta       bytes    UTF-8 `key = value` lines (includes `kind`)
//! count      u32      number of tensors
//! repeated count times:
//!   name_len u32, name UTF-8 bytes
//!   ndim     u32, dims u64 x ndim
//!   data     f64 x product(dims)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvFile;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MMRPHBIN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub meta: KvFile,
    tensors: Vec<(String, Tensor<f64>)>,
}

impl Container {
    pub fn new(kind: &str) -> Self {
        let mut meta = KvFile::new();
        meta.push("kind", kind);
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn kind(&self) -> Option<&str> {
        self.meta.get("kind")
    }

    pub fn expect_kind(&self, kind: &str, path: &Path) -> Result<()> {
        match self.kind() {
            Some(k) if k == kind => Ok(()),
            other => Err(Error::malformed(path, format!("expected kind `{kind}`, found {other:?}"))),
        }
    }

    pub fn push_tensor<S: Scalar>(&mut self, name: impl Into<String>, tensor: &Tensor<S>) {
        self.tensors.push((name.into(), tensor.cast()));
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> &[(String, Tensor<f64>)] {
        &self.tensors
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = self.meta.render("");
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != MAGIC {
            return Err(Error::malformed(origin, "bad magic"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::malformed(origin, format!("unsupported container version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::malformed(origin, "metadata is not UTF-8"))?;
        let meta = KvFile::parse_str(meta, origin)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::malformed(origin, "tensor name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = shape.iter().product();
            if len.checked_mul(8).is_none_or(|n| n > r.remaining()) {
                return Err(Error::malformed(origin, format!("tensor `{name}` truncated")));
            }
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::malformed(origin, "trailing bytes"));
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::malformed(self.origin, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_round_trip() {
        let mut c = Container::new("test");
        c.meta.push("note", "hello");
        c.push_tensor("a", &Tensor::<f64>::new([2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap());
        c.push_tensor("s", &Tensor::<f32>::scalar(0.25));
        let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor("s").unwrap().item().unwrap(), 0.25);
    }

    #[test]
    fn rejects_corruption() {
        let c = Container::new("test");
        let mut bytes = c.to_bytes();
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes, Path::new("mem")).is_err());
        let mut c = Container::new("test");
        c.push_tensor("a", &Tensor::<f64>::zeros([3]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 4], Path::new("mem")).is_err());
    }
}
