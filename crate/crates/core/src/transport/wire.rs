//! Byte-level primitives of the frame format.
//!
//! Integers are LEB128 varints. Id sets are sorted, then written as runs:
//! `nruns`, then per run `(start - previous_run_end, len - 1)`, so a set of
//! consecutive ids costs a handful of bytes regardless of its size.

use thiserror::Error;

/// Upper bound on `4 + len` for a single frame.
pub const MAX_FRAME: usize = 1 << 30;

/// Upper bound on the number of ids a decoded set may expand to.
pub const MAX_SET_LEN: u64 = 1 << 22;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("frame truncated: needed {needed} bytes, had {had}")]
    Truncated { needed: usize, had: usize },
    #[error("unknown message tag {0}")]
    UnknownTag(u16),
    #[error("declared length {declared} does not match {actual} available bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("varint overflows 64 bits")]
    VarintOverflow,
    #[error("frame of {0} bytes exceeds limit")]
    Overlong(usize),
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("{0} trailing bytes after message body")]
    TrailingBytes(usize),
    #[error("id set run overflows id space")]
    IdOverflow,
    #[error("invalid value {value} for field {field}")]
    InvalidField { field: &'static str, value: u64 },
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn varint(&mut self, mut v: u64) {
        while v >= 0x80 {
            self.buf.push((v as u8) | 0x80);
            v >>= 7;
        }
        self.buf.push(v as u8);
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.varint(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, vals: &[f64]) {
        self.varint(vals.len() as u64);
        self.buf.reserve(vals.len() * 8);
        for v in vals {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// `ids` must be ascending and unique.
    pub fn id_set<I: IntoIterator<Item = u64>>(&mut self, ids: I) {
        let mut runs: Vec<(u64, u64)> = Vec::new();
        for id in ids {
            if let Some((start, len)) = runs.last_mut() {
                if *start + *len == id {
                    *len += 1;
                    continue;
                }
                debug_assert!(id >= *start + *len, "id set not ascending");
            }
            runs.push((id, 1));
        }
        self.varint(runs.len() as u64);
        let mut prev_end = 0u64;
        for (start, len) in runs {
            self.varint(start - prev_end);
            self.varint(len - 1);
            prev_end = start + len;
        }
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated { needed: n, had: self.remaining() });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(WireError::InvalidField { field: "bool", value: v as u64 }),
        }
    }

    pub fn varint(&mut self) -> Result<u64, WireError> {
        let mut value = 0u64;
        for i in 0..10 {
            let byte = self.u8()?;
            let bits = (byte & 0x7F) as u64;
            if i == 9 && bits > 1 {
                return Err(WireError::VarintOverflow);
            }
            value |= bits << (7 * i);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(WireError::VarintOverflow)
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        let v = self.varint()?;
        u32::try_from(v).map_err(|_| WireError::InvalidField { field: "u32", value: v })
    }

    /// A length prefix that must fit in the remaining input.
    /// Reads an element count, rejecting it unless `elem` bytes per
    /// element could still follow.
    pub fn len(&mut self, elem: usize) -> Result<usize, WireError> {
        let n = self.varint()?;
        let bytes = (n as u128) * (elem as u128);
        if bytes > self.remaining() as u128 {
            return Err(WireError::Truncated { needed: bytes.min(usize::MAX as u128) as usize, had: self.remaining() });
        }
        Ok(n as usize)
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, WireError> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }

    pub fn str(&mut self) -> Result<String, WireError> {
        String::from_utf8(self.bytes()?).map_err(|_| WireError::InvalidUtf8)
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>, WireError> {
        let n = self.len(8)?;
        let raw = self.take(n * 8)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub fn id_set(&mut self) -> Result<Vec<u64>, WireError> {
        // each run costs at least two bytes
        let nruns = self.len(2)?;
        let mut out = Vec::new();
        let mut prev_end = 0u64;
        for _ in 0..nruns {
            let gap = self.varint()?;
            let len = self.varint()?.checked_add(1).ok_or(WireError::IdOverflow)?;
            let start = prev_end.checked_add(gap).ok_or(WireError::IdOverflow)?;
            let end = start.checked_add(len).ok_or(WireError::IdOverflow)?;
            if out.len() as u64 + len > MAX_SET_LEN {
                return Err(WireError::Overlong(len.min(usize::MAX as u64) as usize));
            }
            out.extend(start..end);
            prev_end = end;
        }
        Ok(out)
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }
}

/// Decimal rendering `a,b,c` of an id list, the baseline the
/// compact encoding is measured against.
pub fn decimal_ids<I: IntoIterator<Item = u64>>(ids: I) -> String {
    ids.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encoded_id_set_len<I: IntoIterator<Item = u64>>(ids: I) -> usize {
    let mut w = Writer::new();
    w.id_set(ids);
    w.into_inner().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varint_boundaries() {
        for v in [0u64, 1, 127, 128, 300, u32::MAX as u64, u64::MAX] {
            let mut w = Writer::new();
            w.varint(v);
            let b = w.into_inner();
            let mut r = Reader::new(&b);
            assert_eq!(r.varint().unwrap(), v);
            r.finish().unwrap();
        }
        let mut w = Writer::new();
        w.varint(300);
        assert_eq!(w.into_inner(), vec![0xAC, 0x02]);
    }

    #[test]
    fn varint_overflow_rejected() {
        let eleven = [0xFFu8; 11];
        assert_eq!(Reader::new(&eleven).varint(), Err(WireError::VarintOverflow));
        let mut tenth_too_big = [0xFFu8; 10];
        tenth_too_big[9] = 0x02;
        assert_eq!(Reader::new(&tenth_too_big).varint(), Err(WireError::VarintOverflow));
    }

    #[test]
    fn id_set_runs() {
        let ids: Vec<u64> = vec![3, 4, 5, 9, 20, 21];
        let mut w = Writer::new();
        w.id_set(ids.iter().copied());
        let b = w.into_inner();
        // 3 runs as (gap, len - 1): (3, 2) (3, 0) (10, 1)
        assert_eq!(b, vec![3, 3, 2, 3, 0, 10, 1]);
        assert_eq!(Reader::new(&b).id_set().unwrap(), ids);
        assert_eq!(encoded_id_set_len(std::iter::empty()), 1);
    }

    #[test]
    fn sequential_hundred_is_three_bytes() {
        assert_eq!(encoded_id_set_len(1..=100), 3);
        assert_eq!(decimal_ids(1..=100).len(), 291);
    }
}
