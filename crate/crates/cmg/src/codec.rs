//! Little-endian binary readers/writers shared by the dataset, checkpoint,
//! weight, and bank file formats. Parse failures carry the byte offset.

use crate::error::{CmgError, Result};

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(CmgError::Parse {
                offset: self.pos as u64,
                message: format!("unexpected end of file (wanted {n} more bytes)"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let off = self.pos as u64;
        let got = self.take(4)?;
        if got != magic {
            return Err(CmgError::Parse {
                offset: off,
                message: format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        Ok(())
    }

    pub fn expect_version(&mut self, supported: u32) -> Result<()> {
        let found = self.read_u32()?;
        if found != supported {
            return Err(CmgError::Version { found, supported });
        }
        Ok(())
    }

    pub fn read_u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn read_u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn read_u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    pub fn read_f64(&mut self) -> Result<f64> {
        let off = self.pos as u64;
        let b = self.take(8)?;
        let v = f64::from_le_bytes(b.try_into().unwrap());
        if !v.is_finite() {
            return Err(CmgError::Parse {
                offset: off,
                message: "non-finite value".into(),
            });
        }
        Ok(v)
    }

    pub fn read_f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(self.read_f64()?);
        }
        Ok(v)
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(CmgError::Parse {
                offset: self.pos as u64,
                message: format!("{} trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn magic(&mut self, magic: &[u8; 4]) -> &mut Self {
        self.buf.extend_from_slice(magic);
        self
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64_slice(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.f64(v);
        }
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_scalars() {
        let mut w = ByteWriter::new();
        w.magic(b"TEST").u32(1).u64(42).f64(-1.5).u8(7);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        assert_eq!(r.read_u32().unwrap(), 1);
        assert_eq!(r.read_u64().unwrap(), 42);
        assert_eq!(r.read_f64().unwrap(), -1.5);
        assert_eq!(r.read_u8().unwrap(), 7);
        r.finish().unwrap();
    }

    #[test]
    fn truncated_input_reports_offset() {
        let mut w = ByteWriter::new();
        w.magic(b"TEST").u32(1);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        r.expect_magic(b"TEST").unwrap();
        r.read_u32().unwrap();
        match r.read_f64() {
            Err(CmgError::Parse { offset, .. }) => assert_eq!(offset, 8),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_is_version_error() {
        let mut w = ByteWriter::new();
        w.u32(2);
        let bytes = w.into_bytes();
        let mut r = ByteReader::new(&bytes);
        match r.expect_version(1) {
            Err(CmgError::Version { found: 2, supported: 1 }) => {}
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
