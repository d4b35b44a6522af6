//! Carry-less range coder: 64-bit state, 32-bit renormalization, 16-bit
//! probabilities. Words are written little-endian.

use super::cdf::{CdfTable, PRECISION_BITS};
use crate::error::{Error, Result};

const WORD: u64 = 1 << 32;
const LOW_MASK: u64 = WORD - 1;
/// Below this range a straddled word boundary is resolved by shrinking.
const BOT: u64 = 1 << 24;
const RAW_BITS: u32 = 16;

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Code the interval `[cum, cum + freq)` of a 2^16 total.
    pub fn encode_interval(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= 1 << PRECISION_BITS);
        let r = self.range >> PRECISION_BITS;
        self.low += r * cum as u64;
        self.range = r * freq as u64;
        while let Some(range) = settle(self.low, self.range) {
            self.range = range;
            self.out.extend_from_slice(&((self.low >> 32) as u32).to_le_bytes());
            self.low <<= 32;
            self.range <<= 32;
        }
    }

    /// Sixteen raw bits under a uniform model.
    pub fn encode_raw16(&mut self, v: u32) {
        self.encode_interval(v & 0xFFFF, 1);
    }

    /// Code `value` with `table`, escaping out-of-range values.
    pub fn encode(&mut self, table: &CdfTable, value: i32) -> Result<()> {
        match table.slot(value) {
            Some(s) => {
                let (c, f) = table.interval(s);
                self.encode_interval(c, f);
            }
            None => {
                let s = table.escape_slot().ok_or_else(|| {
                    Error::Consistency(format!(
                        "symbol {value} outside [{}, {}] and table has no escape",
                        table.min_symbol(),
                        table.max_symbol()
                    ))
                })?;
                let (c, f) = table.interval(s);
                self.encode_interval(c, f);
                let z = zigzag(value);
                self.encode_raw16(z >> RAW_BITS);
                self.encode_raw16(z);
            }
        }
        Ok(())
    }

    /// Flush: emit the shortest word that pins a value inside the final interval.
    pub fn finish(mut self) -> Vec<u8> {
        let v = (self.low as u128 + LOW_MASK as u128) & !(LOW_MASK as u128);
        debug_assert!(v < self.low as u128 + self.range as u128);
        self.out.extend_from_slice(&((v >> 32) as u32).to_le_bytes());
        self.out
    }

    pub fn bytes_so_far(&self) -> usize {
        self.out.len()
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    data: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        let mut d = Self { low: 0, range: u64::MAX, code: 0, data, pos: 0 };
        d.code = (d.next_word() as u64) << 32 | d.next_word() as u64;
        d
    }

    /// Words past the end read as zero.
    fn next_word(&mut self) -> u32 {
        let mut b = [0u8; 4];
        for (i, byte) in b.iter_mut().enumerate() {
            *byte = self.data.get(self.pos + i).copied().unwrap_or(0);
        }
        self.pos += 4;
        u32::from_le_bytes(b)
    }

    fn target(&self) -> (u64, u32) {
        let r = self.range >> PRECISION_BITS;
        let t = (self.code.wrapping_sub(self.low) / r).min((1 << PRECISION_BITS) - 1);
        (r, t as u32)
    }

    fn consume(&mut self, r: u64, cum: u32, freq: u32) {
        self.low = self.low.wrapping_add(r * cum as u64);
        self.range = r * freq as u64;
        while let Some(range) = settle(self.low, self.range) {
            self.range = range;
            self.code = self.code << 32 | self.next_word() as u64;
            self.low <<= 32;
            self.range <<= 32;
        }
    }

    pub fn decode_raw16(&mut self) -> u32 {
        let (r, t) = self.target();
        self.consume(r, t, 1);
        t
    }

    pub fn decode(&mut self, table: &CdfTable) -> i32 {
        let (r, t) = self.target();
        let slot = table.find(t);
        let (c, f) = table.interval(slot);
        self.consume(r, c, f);
        if Some(slot) == table.escape_slot() {
            let hi = self.decode_raw16();
            let lo = self.decode_raw16();
            unzigzag(hi << RAW_BITS | lo)
        } else {
            table.offset() + slot as i32
        }
    }

    /// True once the decoder has read past the end of the stream by more than
    /// the zero padding a valid stream can need.
    pub fn overran(&self) -> bool {
        self.pos > self.data.len() + 4
    }
}

/// Range to continue with once the top word of `low` is final, or `None`
/// while more symbols can still be coded without emitting.
#[inline]
fn settle(low: u64, range: u64) -> Option<u64> {
    if range >= WORD {
        return None;
    }
    if (low ^ (low + (range - 1))) >> 32 == 0 {
        Some(range)
    } else if range < BOT {
        // straddling a boundary with little range left: drop the part above it
        Some(WORD - (low & LOW_MASK))
    } else {
        None
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    (z >> 1) as i32 ^ -((z & 1) as i32)
}

/// Encode `symbols[i]` with `tables[i]`.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::Dimension(format!("{} symbols but {} tables", symbols.len(), tables.len())));
    }
    let mut enc = RangeEncoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(t, s)?;
    }
    Ok(enc.finish())
}

/// Decode `count` symbols, the i-th with `tables[i]`.
pub fn range_decode(bytes: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i32>> {
    if tables.len() != count {
        return Err(Error::Dimension(format!("{count} symbols requested but {} tables", tables.len())));
    }
    let mut dec = RangeDecoder::new(bytes);
    let out: Vec<i32> = tables.iter().map(|t| dec.decode(t)).collect();
    if dec.overran() {
        return Err(Error::Decode("range decoder ran past the end of the stream".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zigzag_round_trips_extremes() {
        for v in [0, 1, -1, 12345, -98765, i32::MAX, i32::MIN] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
    }

    #[test]
    fn empty_stream_is_one_word() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert_eq!(bytes.len(), 4);
        assert!(range_decode(&bytes, &[], 0).unwrap().is_empty());
    }

    #[test]
    fn uniform_round_trip() {
        let t = CdfTable::uniform(4, 0).unwrap();
        let tabs = [&t; 4];
        let bytes = range_encode(&[0, 1, 2, 3], &tabs).unwrap();
        assert_eq!(range_decode(&bytes, &tabs, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn escapes_round_trip() {
        let t = CdfTable::gaussian(1.0).unwrap();
        let vals = [0, 17, -17, 1_000_000, i32::MIN, i32::MAX, 3];
        let tabs = vec![&t; vals.len()];
        let bytes = range_encode(&vals, &tabs).unwrap();
        assert_eq!(range_decode(&bytes, &tabs, vals.len()).unwrap(), vals);
    }

    #[test]
    fn out_of_range_without_escape_is_an_error() {
        let t = CdfTable::uniform(2, 0).unwrap();
        assert!(matches!(range_encode(&[5], &[&t]), Err(Error::Consistency(_))));
    }
}
