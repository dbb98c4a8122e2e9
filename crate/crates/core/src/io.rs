//! Little-endian helpers shared by the binary containers, plus file checksums.

use std::io::{ErrorKind, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub(crate) struct ByteWriter<'a, W: Write> {
    out: &'a mut W,
}

impl<'a, W: Write> ByteWriter<'a, W> {
    pub fn new(out: &'a mut W) -> Self {
        Self { out }
    }

    pub fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.out.write_all(b)?;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_bits().to_le_bytes())
    }

    pub fn str16(&mut self, s: &str) -> Result<()> {
        let len = u16::try_from(s.len()).map_err(|_| Error::invalid("string too long"))?;
        self.bytes(&len.to_le_bytes())?;
        self.bytes(s.as_bytes())
    }

    pub fn str32(&mut self, s: &str) -> Result<()> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }
}

pub(crate) struct ByteReader<'a, R: Read> {
    input: &'a mut R,
}

impl<'a, R: Read> ByteReader<'a, R> {
    pub fn new(input: &'a mut R) -> Self {
        Self { input }
    }

    pub fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.input.read_exact(buf).map_err(|e| match e.kind() {
            ErrorKind::UnexpectedEof => Error::Corrupt("unexpected end of file".into()),
            _ => Error::Io(e),
        })
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    pub fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got: [u8; 8] = self.array()?;
        if &got != magic {
            return Err(Error::Corrupt(format!(
                "bad magic header {:?}",
                String::from_utf8_lossy(&got)
            )));
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(u64::from_le_bytes(self.array()?)))
    }

    pub fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; n];
        self.fill(&mut v)?;
        Ok(v)
    }

    pub fn str16(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        let raw = self.vec(len)?;
        String::from_utf8(raw).map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }

    pub fn str32(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        if len > 1 << 26 {
            return Err(Error::Corrupt(format!("implausible string length {len}")));
        }
        let raw = self.vec(len)?;
        String::from_utf8(raw).map_err(|_| Error::Corrupt("invalid utf-8 string".into()))
    }

    pub fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.input.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Corrupt("trailing bytes after payload".into())),
        }
    }
}

/// Hex SHA-256 of a file's contents.
pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}
