//! Carry-propagating byte-wise range coder over 16-bit quantized CDFs.
//!
//! Integer-only, so streams are bit-identical across platforms. The layout
//! follows the classic LZMA coder: a 33-bit `low`, a 32-bit `range`, and a
//! one-byte cache that absorbs carries.

use crate::entropy::cdf::{CdfTable, PRECISION, TOTAL};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;

/// Bits used to signal the magnitude length of an escaped value.
const ESCAPE_LEN_BITS: u32 = 6;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self { low: 0, range: u32::MAX, cache: 0, cache_size: 1, out: Vec::new() }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || (self.low >> 32) != 0 {
            let carry = (self.low >> 32) as u8;
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = ((self.low >> 24) & 0xFF) as u8;
        }
        self.cache_size += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    /// Encode the interval `[cum, cum + freq)` out of `TOTAL`.
    pub fn encode(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += r as u64 * cum as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode_bit(&mut self, bit: bool) {
        let half = TOTAL / 2;
        self.encode(if bit { half } else { 0 }, half);
    }

    pub fn encode_bits(&mut self, value: u32, n: u32) {
        for i in (0..n).rev() {
            self.encode_bit((value >> i) & 1 == 1);
        }
    }

    /// Encode `value` under `table`, escaping out-of-support values.
    pub fn encode_symbol(&mut self, value: i32, table: &CdfTable) {
        match table.index_of(value) {
            Some(i) => self.encode(table.cdf[i], table.freq(i)),
            None => {
                let e = table.escape_index();
                self.encode(table.cdf[e], table.freq(e));
                let z = zigzag(value);
                let n = 32 - z.leading_zeros();
                self.encode_bits(n, ESCAPE_LEN_BITS);
                if n > 0 {
                    // the leading one bit is implied by `n`
                    self.encode_bits(z & !(1u32 << (n - 1)), n - 1);
                }
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    data: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(data: &'a [u8]) -> Result<Self> {
        let mut d = Self { data, pos: 0, code: 0, range: u32::MAX };
        for _ in 0..5 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| Error::Bitstream(format!("range-coded stream truncated at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    fn normalize(&mut self) -> Result<()> {
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte()? as u32;
            self.range <<= 8;
        }
        Ok(())
    }

    /// Locate the cumulative count of the next symbol; follow with [`Self::consume`].
    fn target(&mut self) -> (u32, u32) {
        let r = self.range >> PRECISION;
        ((self.code / r).min(TOTAL - 1), r)
    }

    fn consume(&mut self, r: u32, cum: u32, freq: u32) -> Result<()> {
        self.code = self.code.wrapping_sub(r * cum);
        self.range = r * freq;
        self.normalize()
    }

    pub fn decode_bit(&mut self) -> Result<bool> {
        let half = TOTAL / 2;
        let (v, r) = self.target();
        let bit = v >= half;
        self.consume(r, if bit { half } else { 0 }, half)?;
        Ok(bit)
    }

    pub fn decode_bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0u32;
        for _ in 0..n {
            v = (v << 1) | self.decode_bit()? as u32;
        }
        Ok(v)
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let (v, r) = self.target();
        let i = table.locate(v);
        self.consume(r, table.cdf[i], table.freq(i))?;
        if i != table.escape_index() {
            return Ok(table.value_of(i));
        }
        let n = self.decode_bits(ESCAPE_LEN_BITS)?;
        if n > 32 {
            return Err(Error::Bitstream(format!("escape length {n} out of range")));
        }
        let z = if n == 0 { 0 } else { (1u32 << (n - 1)) | self.decode_bits(n - 1)? };
        Ok(unzigzag(z))
    }

    /// True when every byte of the stream has been consumed.
    pub fn exhausted(&self) -> bool {
        self.pos == self.data.len()
    }
}

fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

fn unzigzag(z: u32) -> i32 {
    ((z >> 1) as i32) ^ -((z & 1) as i32)
}

/// Cost in bits of the bypass payload following an escape symbol.
pub fn escape_payload_bits(value: i32) -> u32 {
    let n = 32 - zigzag(value).leading_zeros();
    ESCAPE_LEN_BITS + n.saturating_sub(1)
}

/// Range-code `symbols`, symbol `i` under `tables[table_index[i]]`.
pub fn range_encode(symbols: &[i32], table_index: &[usize], tables: &[CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != table_index.len() {
        return Err(Error::Contract(format!(
            "{} symbols but {} table indices",
            symbols.len(),
            table_index.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, &t) in symbols.iter().zip(table_index) {
        let table = tables
            .get(t)
            .ok_or_else(|| Error::Contract(format!("table index {t} out of range")))?;
        enc.encode_symbol(s, table);
    }
    Ok(enc.finish())
}

/// Inverse of [`range_encode`]; the symbol count is `table_index.len()`.
pub fn range_decode(bytes: &[u8], table_index: &[usize], tables: &[CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut out = Vec::with_capacity(table_index.len());
    for &t in table_index {
        let table = tables
            .get(t)
            .ok_or_else(|| Error::Contract(format!("table index {t} out of range")))?;
        out.push(dec.decode_symbol(table)?);
    }
    if !dec.exhausted() {
        return Err(Error::Bitstream("trailing bytes after range-coded payload".into()));
    }
    Ok(out)
}
