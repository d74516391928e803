//! Little-endian byte readers/writers for the on-disk container formats.
//!
//! Readers track their byte offset so format errors can name the exact
//! offending position.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: Option<PathBuf>,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8], path: Option<&Path>) -> Self {
        ByteReader {
            bytes,
            pos: 0,
            path: path.map(Path::to_path_buf),
        }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn error(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path.clone(), self.pos as u64, reason)
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated: need {n} bytes for {what}, have {}",
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            self.pos -= 4;
            return Err(self.error(format!(
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(magic),
                String::from_utf8_lossy(got)
            )));
        }
        Ok(())
    }

    pub fn read_u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn read_u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_f32_vec(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.error("length overflow"))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_u16_vec(&mut self, n: usize, what: &str) -> Result<Vec<u16>> {
        let b = self.take(n.checked_mul(2).ok_or_else(|| self.error("length overflow"))?, what)?;
        Ok(b.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect())
    }

    pub fn read_u32_vec(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let b = self.take(n.checked_mul(4).ok_or_else(|| self.error("length overflow"))?, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn read_bytes(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        self.take(n, what)
    }

    /// Verify and remove a trailing CRC32 covering all preceding bytes.
    pub fn strip_trailing_crc(&mut self) -> Result<()> {
        if self.bytes.len() < self.pos + 4 {
            self.pos = self.bytes.len();
            return Err(self.error("truncated: missing trailing CRC32"));
        }
        let body_len = self.bytes.len() - 4;
        let stored = u32::from_le_bytes(self.bytes[body_len..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(&self.bytes[..body_len]);
        if stored != actual {
            self.pos = body_len;
            return Err(self.error(format!(
                "CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}"
            )));
        }
        self.bytes = &self.bytes[..body_len];
        Ok(())
    }

    /// Error if any bytes remain unread.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.error(format!(
                "trailing bytes: {} unread",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_magic(&mut self, magic: &[u8; 4]) {
        self.buf.extend_from_slice(magic);
    }

    pub fn push_u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn push_u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn push_f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn push_u16_slice(&mut self, vs: &[u16]) {
        self.buf.reserve(vs.len() * 2);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn push_u32_slice(&mut self, vs: &[u32]) {
        self.buf.reserve(vs.len() * 4);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Append a CRC32 of everything written so far.
    pub fn push_trailing_crc(&mut self) {
        let crc = crc32fast::hash(&self.buf);
        self.push_u32(crc);
    }

    pub fn write_file(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}
