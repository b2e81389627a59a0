//! Little-endian binary readers/writers shared by the checkpoint, feature
//! store, and score matrix formats.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub(crate) fn write_u16<W: Write>(w: &mut W, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn write_f32<W: Write>(w: &mut W, v: f32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Tracks the byte offset of a reader so truncation errors can name the
/// position where data ran out.
pub(crate) struct CountingReader<R> {
    inner: R,
    pub offset: u64,
}

impl<R: Read> CountingReader<R> {
    pub fn new(inner: R) -> Self {
        Self { inner, offset: 0 }
    }

    fn fill(&mut self, buf: &mut [u8], header: bool) -> Result<()> {
        let mut read = 0;
        while read < buf.len() {
            let n = self.inner.read(&mut buf[read..])?;
            if n == 0 {
                return Err(if header {
                    Error::CorruptHeader(format!(
                        "file ended at byte {} while reading the header",
                        self.offset + read as u64
                    ))
                } else {
                    Error::TruncatedRecord {
                        offset: self.offset + read as u64,
                    }
                });
            }
            read += n;
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    pub fn read_exact_header(&mut self, buf: &mut [u8]) -> Result<()> {
        self.fill(buf, true)
    }

    pub fn read_exact_record(&mut self, buf: &mut [u8]) -> Result<()> {
        self.fill(buf, false)
    }

    pub fn u16_header(&mut self) -> Result<u16> {
        let mut b = [0u8; 2];
        self.read_exact_header(&mut b)?;
        Ok(u16::from_le_bytes(b))
    }

    pub fn u32_header(&mut self) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact_header(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn u64_header(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_header(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn u64_record(&mut self) -> Result<u64> {
        let mut b = [0u8; 8];
        self.read_exact_record(&mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    pub fn f64_record(&mut self) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact_record(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }

    pub fn f32_record(&mut self) -> Result<f32> {
        let mut b = [0u8; 4];
        self.read_exact_record(&mut b)?;
        Ok(f32::from_le_bytes(b))
    }

    /// Error if any bytes remain after the declared records.
    pub fn expect_eof(&mut self, what: &str) -> Result<()> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b)? {
            0 => Ok(()),
            _ => Err(Error::HeaderMismatch(format!(
                "{what}: trailing bytes after byte {}",
                self.offset
            ))),
        }
    }
}

/// Check the 4-byte magic at the start of a file.
pub(crate) fn check_magic<R: Read>(r: &mut CountingReader<R>, expected: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact_header(&mut found)?;
    if &found != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub(crate) fn check_version<R: Read>(r: &mut CountingReader<R>, expected: u16) -> Result<()> {
    let found = r.u16_header()?;
    if found != expected {
        return Err(Error::VersionMismatch { expected, found });
    }
    Ok(())
}
