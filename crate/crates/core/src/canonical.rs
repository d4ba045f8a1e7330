//! Big-endian, length-prefixed byte encoding shared by the ledger and the
//! agent payload format. Fields are written in declaration order with no
//! padding, so the same values always produce the same bytes.

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u16(&mut self, v: u16) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    /// IEEE-754 bit pattern, big-endian.
    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.u64(v.to_bits())
    }

    /// Raw bytes of a fixed-width field, no length prefix.
    pub fn fixed(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    /// `u32` length followed by the bytes.
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u32(v.len() as u32);
        self.fixed(v)
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.buf)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        Decoder { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Decode(format!("need {n} bytes at offset {}, have {}", self.pos, self.data.len() - self.pos)))?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<&'a str> {
        std::str::from_utf8(self.bytes()?).map_err(|e| Error::Decode(e.to_string()))
    }

    /// Errors if any input is left over.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Decode(format!("{} trailing bytes", self.data.len() - self.pos)));
        }
        Ok(())
    }
}

/// Feature vector as `u32` count followed by one `f64` per entry.
pub fn encode_features(features: &[f64]) -> Vec<u8> {
    let mut e = Encoder::new();
    e.u32(features.len() as u32);
    for &v in features {
        e.f64(v);
    }
    e.finish()
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut d = Decoder::new(bytes);
    let n = d.u32()? as usize;
    if n.checked_mul(8) != Some(bytes.len().saturating_sub(4)) {
        return Err(Error::Decode(format!("feature count {n} does not match {} payload bytes", bytes.len())));
    }
    let out = (0..n).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integers_are_big_endian() {
        let bytes = Encoder::new().u16(0x0102).u32(0x03040506).u64(7).finish();
        assert_eq!(bytes, [1, 2, 3, 4, 5, 6, 0, 0, 0, 0, 0, 0, 0, 7]);
    }

    #[test]
    fn strings_carry_length() {
        let bytes = Encoder::new().str("ab").finish();
        assert_eq!(bytes, [0, 0, 0, 2, b'a', b'b']);
        let mut d = Decoder::new(&bytes);
        assert_eq!(d.str().unwrap(), "ab");
        d.finish().unwrap();
    }

    #[test]
    fn features_round_trip_bit_exact() {
        let v = vec![0.0, 1.0, 0.1 + 0.2, f64::MIN_POSITIVE, -0.0];
        let back = decode_features(&encode_features(&v)).unwrap();
        assert_eq!(
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_and_padded_payloads_fail() {
        let bytes = encode_features(&[0.5, 0.25]);
        assert!(decode_features(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_features(&long).is_err());
        assert!(decode_features(&[0xff, 0xff, 0xff, 0xff]).is_err());
    }
}
