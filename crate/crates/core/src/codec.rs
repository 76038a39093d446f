//! Little-endian encode/decode helpers shared by the binary file formats.

use crate::error::{Error, Result};

#[derive(Default)]
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
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    /// Writes a real as float32. Callers are expected to hold values that are
    /// already representable in single precision.
    pub fn real(&mut self, v: f64) {
        self.f32(v as f32);
    }

    pub fn reals(&mut self, vs: &[f64]) {
        for &v in vs {
            self.real(v);
        }
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    /// Appends a u64 length prefix followed by the section payload.
    pub fn section(&mut self, payload: &[u8]) {
        self.u64(payload.len() as u64);
        self.bytes(payload);
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

pub(crate) struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated(format!(
                "{}: needed {n} bytes at offset {}, {} left",
                self.what,
                self.pos,
                self.remaining()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn real(&mut self) -> Result<f64> {
        Ok(self.f32()? as f64)
    }

    pub fn reals(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.real()).collect()
    }

    pub fn len(&mut self) -> Result<usize> {
        let n = self.u32()? as usize;
        if n > self.remaining() * 4 + 16 {
            return Err(Error::Format(format!(
                "{}: implausible count {n}",
                self.what
            )));
        }
        Ok(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format(format!("{}: invalid utf-8 string", self.what)))
    }

    /// Consumes and returns everything left.
    pub fn rest(&mut self) -> &'a [u8] {
        let out = &self.buf[self.pos..];
        self.pos = self.buf.len();
        out
    }

    pub fn section(&mut self) -> Result<Decoder<'a>> {
        let n = self.u64()? as usize;
        let what = self.what;
        Ok(Decoder::new(self.take(n)?, what))
    }

    pub fn expect_end(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.remaining()
            )));
        }
        Ok(())
    }
}

/// Rounds to the nearest single-precision value so that float32 persistence
/// is lossless.
pub(crate) fn snap(v: f64) -> f64 {
    v as f32 as f64
}

pub(crate) fn snap_all(vs: &mut [f64]) {
    for v in vs {
        *v = snap(*v);
    }
}

/// Like [`snap`], but never rounds a positive value downward.
pub(crate) fn snap_up(v: f64) -> f64 {
    let s = v as f32;
    if (s as f64) < v {
        f32::from_bits(s.to_bits() + 1) as f64
    } else {
        s as f64
    }
}
