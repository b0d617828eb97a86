//! Little-endian helpers shared by the binary file formats.

use std::io::Write;

use crate::error::{Error, Result};

pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new(magic: &[u8; 4], version: u32) -> Self {
        let mut w = Self { buf: Vec::new() };
        w.buf.extend_from_slice(magic);
        w.u32(version);
        w
    }

    /// A writer with no header, for formats that bring their own.
    pub fn raw() -> Self {
        Self { buf: Vec::new() }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.buf).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    /// Checks the magic tag and returns the reader positioned after the version.
    pub fn open(buf: &'a [u8], magic: &[u8; 4], version: u32) -> Result<Self> {
        let mut r = Self { buf, pos: 0 };
        let tag = r.take(4)?;
        if tag != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let at = r.pos as u64;
        let v = r.u32()?;
        if v != version {
            return Err(Error::format(at, format!("unsupported version {v}")));
        }
        Ok(r)
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let start = self.pos as u64;
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format(start, "length overflow"))?)?;
        let vals: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Err(Error::format(start + 8 * i as u64, "non-finite value"));
        }
        Ok(vals)
    }

    pub fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.buf.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &std::path::Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
