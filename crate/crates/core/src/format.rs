//! Little-endian binary helpers shared by every on-disk format.
//!
//! Files are assembled in memory and written in one call, and read back fully
//! before decoding, so a truncated file surfaces as a [`Error::Format`]
//! rather than a partial object.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"PDSC";
pub const CODEBOOK_MAGIC: &[u8; 4] = b"PCBK";
pub const REFERENCE_MAGIC: &[u8; 4] = b"PREF";
pub const INDEX_MAGIC: &[u8; 4] = b"PIDX";
pub const STORE_MAGIC: &[u8; 4] = b"PVST";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
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

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// u32 length prefix followed by the UTF-8 bytes.
    pub fn string(&mut self, s: &str) -> Result<()> {
        let len = u32::try_from(s.len())
            .map_err(|_| Error::InvalidParameter(format!("string too long: {} bytes", s.len())))?;
        self.u32(len);
        self.bytes(s.as_bytes());
        Ok(())
    }

    /// LEB128 unsigned varint.
    pub fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_to(self, path: impl AsRef<Path>) -> Result<u64> {
        let len = self.buf.len() as u64;
        fs::write(path, self.buf)?;
        Ok(len)
    }
}

#[derive(Debug)]
pub struct ByteReader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf, pos: 0 }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::format(self.what, reason)
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!(
                "unexpected end of data at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    pub fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    pub fn f32(&mut self) -> Result<f32> {
        self.array().map(f32::from_le_bytes)
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n
            .checked_mul(4)
            .ok_or_else(|| self.err("vector length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("string is not valid UTF-8"))
    }

    pub fn varint(&mut self) -> Result<u64> {
        let mut value = 0u64;
        let mut shift = 0u32;
        loop {
            let byte = self.u8()?;
            if shift == 63 && byte > 1 {
                return Err(self.err("varint overflows u64"));
            }
            value |= u64::from(byte & 0x7f) << shift;
            if byte & 0x80 == 0 {
                return Ok(value);
            }
            shift += 7;
            if shift > 63 {
                return Err(self.err("varint overflows u64"));
            }
        }
    }

    /// Checks the four magic bytes and the version word.
    pub fn header(&mut self, magic: &[u8; 4]) -> Result<u32> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(version)
    }

    pub fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(self.err(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

/// Converts a count read from a header into a usize, rejecting values that
/// cannot possibly fit in the remaining bytes (each element needs at least
/// `min_bytes_each`).
pub fn checked_count(reader: &ByteReader<'_>, count: u64, min_bytes_each: usize) -> Result<usize> {
    let n = usize::try_from(count).map_err(|_| reader.err("count exceeds address space"))?;
    if n.saturating_mul(min_bytes_each) > reader.remaining() {
        return Err(reader.err(format!(
            "declared count {n} exceeds the {} remaining bytes",
            reader.remaining()
        )));
    }
    Ok(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn varint_roundtrip(values in proptest::collection::vec(any::<u64>(), 0..64)) {
            let mut w = ByteWriter::new();
            for &v in &values {
                w.varint(v);
            }
            let bytes = w.into_inner();
            let mut r = ByteReader::new("test", &bytes);
            for &v in &values {
                prop_assert_eq!(r.varint().unwrap(), v);
            }
            prop_assert!(r.finish().is_ok());
        }
    }

    #[test]
    fn varint_small_values_are_one_byte() {
        let mut w = ByteWriter::new();
        w.varint(0);
        w.varint(127);
        assert_eq!(w.len(), 2);
        w.varint(128);
        assert_eq!(w.into_inner()[2..], [0x80, 0x01]);
    }

    #[test]
    fn truncated_reads_fail() {
        let mut r = ByteReader::new("test", &[1, 2, 3]);
        assert!(r.u32().is_err());
        let mut r = ByteReader::new("test", &[0x80]);
        assert!(r.varint().is_err());
    }

    #[test]
    fn header_rejects_wrong_magic_and_version() {
        let mut w = ByteWriter::new();
        w.bytes(b"PIDX");
        w.u32(2);
        let bytes = w.into_inner();
        assert!(ByteReader::new("t", &bytes).header(b"PCBK").is_err());
        assert!(ByteReader::new("t", &bytes).header(b"PIDX").is_err());
    }
}
