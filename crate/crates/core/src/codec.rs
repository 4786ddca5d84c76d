//! Little-endian fixed-width primitives shared by the binary file formats.

use byteorder::{ByteOrder, LittleEndian};

#[derive(Debug, Default)]
pub(crate) struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u32(&mut self, v: u32) {
        let mut b = [0u8; 4];
        LittleEndian::write_u32(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn u64(&mut self, v: u64) {
        let mut b = [0u8; 8];
        LittleEndian::write_u64(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn f64(&mut self, v: f64) {
        let mut b = [0u8; 8];
        LittleEndian::write_f64(&mut b, v);
        self.buf.extend_from_slice(&b);
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    pub fn u64s(&mut self, vs: &[u64]) {
        for &v in vs {
            self.u64(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Raised when the input ends before a field is complete.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Truncated {
    pub offset: usize,
    pub needed: usize,
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], Truncated> {
        if self.remaining() < n {
            return Err(Truncated {
                offset: self.pos,
                needed: n,
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32, Truncated> {
        self.take(4).map(LittleEndian::read_u32)
    }

    pub fn u64(&mut self) -> Result<u64, Truncated> {
        self.take(8).map(LittleEndian::read_u64)
    }

    pub fn f64(&mut self) -> Result<f64, Truncated> {
        self.take(8).map(LittleEndian::read_f64)
    }

    /// Checks that `count` elements of `width` bytes fit before allocating.
    pub fn ensure(&self, count: u64, width: usize) -> Result<usize, Truncated> {
        let need = (count as u128) * (width as u128);
        if need > self.remaining() as u128 {
            return Err(Truncated {
                offset: self.pos,
                needed: need.min(usize::MAX as u128) as usize,
            });
        }
        Ok(count as usize)
    }

    pub fn f64s(&mut self, count: u64) -> Result<Vec<f64>, Truncated> {
        let n = self.ensure(count, 8)?;
        let raw = self.take(n * 8)?;
        let mut out = vec![0.0; n];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    pub fn u64s(&mut self, count: u64) -> Result<Vec<u64>, Truncated> {
        let n = self.ensure(count, 8)?;
        let raw = self.take(n * 8)?;
        let mut out = vec![0u64; n];
        LittleEndian::read_u64_into(raw, &mut out);
        Ok(out)
    }

    pub fn str(&mut self) -> Result<String, Truncated> {
        let n = self.u64()?;
        let n = self.ensure(n, 1)?;
        let raw = self.take(n)?;
        Ok(String::from_utf8_lossy(raw).into_owned())
    }
}
