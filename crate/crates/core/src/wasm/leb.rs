//! LEB128 readers and writers.
//!
//! Readers return the decoded value together with the number of bytes consumed
//! so callers can keep the original encoding width around.

use super::DecodeError;

/// Byte cursor over a wasm binary that reports absolute offsets in errors.
#[derive(Debug, Clone)]
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self::with_base(bytes, 0)
    }

    /// Reader whose reported offsets are shifted by `base`.
    pub fn with_base(bytes: &'a [u8], base: usize) -> Self {
        Reader { bytes, pos: 0, base }
    }

    pub fn pos(&self) -> usize {
        self.pos
    }

    pub fn offset(&self) -> usize {
        self.base + self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn slice(&self, start: usize, end: usize) -> &'a [u8] {
        &self.bytes[start..end]
    }

    pub fn malformed(&self, reason: impl Into<String>) -> DecodeError {
        DecodeError::Malformed {
            offset: self.offset(),
            reason: reason.into(),
        }
    }

    pub fn byte(&mut self) -> Result<u8, DecodeError> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| self.malformed("unexpected end of input"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(self.malformed(format!(
                "need {n} bytes, {} remain",
                self.remaining()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        let start = self.offset();
        let (v, n) = read_unsigned(&self.bytes[self.pos..], 32)
            .map_err(|reason| DecodeError::Malformed { offset: start, reason })?;
        self.pos += n;
        Ok(v as u32)
    }

    pub fn s32(&mut self) -> Result<i32, DecodeError> {
        let start = self.offset();
        let (v, n) = read_signed(&self.bytes[self.pos..], 32)
            .map_err(|reason| DecodeError::Malformed { offset: start, reason })?;
        self.pos += n;
        Ok(v as i32)
    }

    pub fn s33(&mut self) -> Result<i64, DecodeError> {
        let start = self.offset();
        let (v, n) = read_signed(&self.bytes[self.pos..], 33)
            .map_err(|reason| DecodeError::Malformed { offset: start, reason })?;
        self.pos += n;
        Ok(v)
    }

    pub fn s64(&mut self) -> Result<i64, DecodeError> {
        let start = self.offset();
        let (v, n) = read_signed(&self.bytes[self.pos..], 64)
            .map_err(|reason| DecodeError::Malformed { offset: start, reason })?;
        self.pos += n;
        Ok(v)
    }

    pub fn name(&mut self) -> Result<String, DecodeError> {
        let len = self.u32()? as usize;
        let at = self.offset();
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::Malformed {
            offset: at,
            reason: "name is not valid UTF-8".into(),
        })
    }
}

/// Decodes an unsigned LEB128 value of at most `bits` bits.
pub fn read_unsigned(bytes: &[u8], bits: u32) -> Result<(u64, usize), String> {
    let max_len = bits.div_ceil(7) as usize;
    let mut result: u64 = 0;
    let mut shift = 0u32;
    for (i, &b) in bytes.iter().enumerate() {
        if i >= max_len {
            return Err("LEB128 value too long".into());
        }
        let low = u64::from(b & 0x7f);
        if i + 1 == max_len {
            // unused high bits of the final byte must be zero
            let used = bits - shift;
            if used < 7 && (low >> used) != 0 {
                return Err("LEB128 value out of range".into());
            }
        }
        result |= low << shift;
        if b & 0x80 == 0 {
            return Ok((result, i + 1));
        }
        shift += 7;
    }
    Err("unterminated LEB128 value".into())
}

/// Decodes a signed LEB128 value of at most `bits` bits.
pub fn read_signed(bytes: &[u8], bits: u32) -> Result<(i64, usize), String> {
    let max_len = bits.div_ceil(7) as usize;
    let mut result: i64 = 0;
    let mut shift = 0u32;
    for (i, &b) in bytes.iter().enumerate() {
        if i >= max_len {
            return Err("LEB128 value too long".into());
        }
        let low = i64::from(b & 0x7f);
        if i + 1 == max_len {
            // remaining bits must be a sign extension of bit (bits-1)
            let used = bits - shift;
            if used < 7 {
                let extra = low >> (used - 1);
                if extra != 0 && extra != (0x7f >> (used - 1)) {
                    return Err("LEB128 value out of range".into());
                }
            }
        }
        result |= low << shift;
        shift += 7;
        if b & 0x80 == 0 {
            if shift < 64 && (b & 0x40) != 0 {
                result |= -1i64 << shift;
            }
            return Ok((result, i + 1));
        }
    }
    Err("unterminated LEB128 value".into())
}

pub fn write_u32(out: &mut Vec<u8>, mut v: u32) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        if v == 0 {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn write_i64(out: &mut Vec<u8>, mut v: i64) {
    loop {
        let byte = (v & 0x7f) as u8;
        v >>= 7;
        let done = (v == 0 && byte & 0x40 == 0) || (v == -1 && byte & 0x40 != 0);
        if done {
            out.push(byte);
            return;
        }
        out.push(byte | 0x80);
    }
}

pub fn write_i32(out: &mut Vec<u8>, v: i32) {
    write_i64(out, i64::from(v));
}

/// Unsigned LEB128 padded to exactly `width` bytes, used when a size prefix
/// must keep its original encoding width.
pub fn write_u32_padded(out: &mut Vec<u8>, v: u32, width: usize) -> bool {
    let mut tmp = Vec::new();
    write_u32(&mut tmp, v);
    if tmp.len() > width || width > 5 {
        return false;
    }
    let mut v = v;
    for i in 0..width {
        let mut byte = (v & 0x7f) as u8;
        v >>= 7;
        if i + 1 < width {
            byte |= 0x80;
        }
        out.push(byte);
    }
    true
}

pub fn write_name(out: &mut Vec<u8>, s: &str) {
    write_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_encodings() {
        let mut out = Vec::new();
        write_u32(&mut out, 624485);
        assert_eq!(out, [0xe5, 0x8e, 0x26]);
        out.clear();
        write_i64(&mut out, -123456);
        assert_eq!(out, [0xc0, 0xbb, 0x78]);
        out.clear();
        write_i32(&mut out, -1);
        assert_eq!(out, [0x7f]);
        out.clear();
        write_i32(&mut out, 64);
        assert_eq!(out, [0xc0, 0x00]);
    }

    #[test]
    fn padded_width_is_preserved() {
        let (v, n) = read_unsigned(&[0x85, 0x80, 0x80, 0x80, 0x00], 32).unwrap();
        assert_eq!((v, n), (5, 5));
        let mut out = Vec::new();
        assert!(write_u32_padded(&mut out, 5, 5));
        assert_eq!(out, [0x85, 0x80, 0x80, 0x80, 0x00]);
        out.clear();
        assert!(!write_u32_padded(&mut out, 300, 1));
    }

    #[test]
    fn rejects_overlong_and_out_of_range() {
        assert!(read_unsigned(&[0x80, 0x80, 0x80, 0x80, 0x80, 0x00], 32).is_err());
        assert!(read_unsigned(&[0xff, 0xff, 0xff, 0xff, 0x7f], 32).is_err());
        assert!(read_signed(&[0xff, 0xff, 0xff, 0xff, 0x4f], 32).is_err());
        assert!(read_unsigned(&[0x80], 32).is_err());
        assert_eq!(read_signed(&[0xff, 0xff, 0xff, 0xff, 0x7f], 32).unwrap().0, -1);
    }

    proptest! {
        #[test]
        fn unsigned_roundtrip(v in any::<u32>()) {
            let mut out = Vec::new();
            write_u32(&mut out, v);
            prop_assert_eq!(read_unsigned(&out, 32).unwrap(), (u64::from(v), out.len()));
        }

        #[test]
        fn signed_roundtrip(v in any::<i64>()) {
            let mut out = Vec::new();
            write_i64(&mut out, v);
            prop_assert_eq!(read_signed(&out, 64).unwrap(), (v, out.len()));
        }

        #[test]
        fn signed32_roundtrip(v in any::<i32>()) {
            let mut out = Vec::new();
            write_i32(&mut out, v);
            let (got, n) = read_signed(&out, 32).unwrap();
            prop_assert_eq!((got as i32, n), (v, out.len()));
        }
    }
}
