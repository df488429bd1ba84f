//! Versioned little-endian binary container used by checkpoint and corpus
//! files.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes
//! version      u32
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! body         format-specific records
//! ```
//!
//! Tensor records are `name_len: u32, name: UTF-8, dtype: u8 (1 = f64),
//! ndim: u32, dims: u64 × ndim, data: f64 × Π dims`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DTYPE_F64: u8 = 1;

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new(magic: &[u8; 8], version: u32, header: &str) -> Self {
        let mut w = Self::default();
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w.u64(header.len() as u64);
        w.buf.extend_from_slice(header.as_bytes());
        w
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u8(DTYPE_F64);
        self.u32(t.ndim() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Checks magic and version and returns the reader with the header text.
    pub fn open(buf: &'a [u8], magic: &[u8; 8], version: u32) -> Result<(Self, String)> {
        let mut r = Self { buf, pos: 0 };
        let m = r
            .take(8)
            .map_err(|_| Error::Load("file too short for magic bytes".into()))?;
        if m != magic {
            return Err(Error::Load(format!(
                "bad magic bytes {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let v = r.u32()?;
        if v != version {
            return Err(Error::Load(format!(
                "unsupported format version {v} (this build reads {version})"
            )));
        }
        let len = r.u64()? as usize;
        let header = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Load(format!("header is not UTF-8: {e}")))?
            .to_string();
        Ok((r, header))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                Error::Load(format!(
                    "truncated file: wanted {n} bytes at offset {}, {} available",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Load("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| Error::Load(format!("bad UTF-8 name: {e}")))
    }

    pub fn tensor(&mut self) -> Result<(String, Tensor)> {
        let name = self.str()?;
        let dtype = self.u8()?;
        if dtype != DTYPE_F64 {
            return Err(Error::Load(format!(
                "tensor `{name}`: unknown dtype tag {dtype}"
            )));
        }
        let ndim = self.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Load(format!("tensor `{name}`: shape overflow")))?;
        let data = self.f64s(n)?;
        let t =
            Tensor::new(shape, data).map_err(|e| Error::Load(format!("tensor `{name}`: {e}")))?;
        Ok((name, t))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn expect_end(&self) -> Result<()> {
        if !self.is_at_end() {
            return Err(Error::Load(format!(
                "{} trailing bytes after the last record",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTFMT\0";

    #[test]
    fn tensor_record_round_trip() {
        let t = Tensor::new(vec![2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]).unwrap();
        let mut w = Writer::new(MAGIC, 3, "{\"a\":1}");
        w.tensor("w", &t);
        let bytes = w.finish();
        let (mut r, header) = Reader::open(&bytes, MAGIC, 3).unwrap();
        assert_eq!(header, "{\"a\":1}");
        let (name, back) = r.tensor().unwrap();
        assert_eq!(name, "w");
        assert!(back.bit_eq(&t));
        r.expect_end().unwrap();
    }

    #[test]
    fn rejects_magic_version_and_truncation() {
        let mut w = Writer::new(MAGIC, 1, "{}");
        w.tensor("x", &Tensor::zeros(&[3]));
        let bytes = w.finish();
        assert!(Reader::open(&bytes, b"OTHERFMT", 1).is_err());
        let err = Reader::open(&bytes, MAGIC, 2).err().unwrap().to_string();
        assert!(err.contains("version"), "{err}");
        let (mut r, _) = Reader::open(&bytes[..bytes.len() - 4], MAGIC, 1).unwrap();
        assert!(matches!(r.tensor(), Err(Error::Load(_))));
    }
}
