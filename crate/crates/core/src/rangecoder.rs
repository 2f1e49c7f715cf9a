//! Byte-oriented range coder over 16-bit frequency tables.
//!
//! The encoder keeps a 32-bit range and a 33-bit low with carry propagation
//! through a cached byte and a run of pending `0xFF` bytes. Interval bounds
//! are `floor(range * cum / 65536)` with a 64-bit product, so adjacent
//! symbols tile the range exactly. Termination writes all four bytes of the
//! final low, so a well-formed payload is consumed to its last byte and
//! never beyond; the decoder checks both.

use crate::entropy::QuantizedCdf;
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const RAW_MAGNITUDE_MAX: i32 = (1 << 15) - 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodedPayload {
    pub bytes: Vec<u8>,
    pub count: usize,
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
    out: Vec<u8>,
    count: usize,
    escapes: usize,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
            count: 0,
            escapes: 0,
        }
    }

    fn emit(&mut self, b: u8) {
        // the very first byte is always zero and is never stored
        if self.started {
            self.out.push(b);
        } else {
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut b = self.cache;
            while self.pending > 0 {
                self.emit(b.wrapping_add(carry));
                b = 0xFF;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_range(&mut self, cum_lo: u32, cum_hi: u32) {
        let r = self.range as u64;
        let a = (r * cum_lo as u64) >> 16;
        let b = (r * cum_hi as u64) >> 16;
        self.low += a;
        self.range = (b - a) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    /// Codes `symbol`, escaping it with 16 raw bits if it lies outside the table.
    pub fn encode(&mut self, symbol: i32, cdf: &QuantizedCdf) -> Result<()> {
        let idx = match cdf.index_of(symbol) {
            Some(i) => i,
            None => {
                let mag = symbol.unsigned_abs();
                if mag > RAW_MAGNITUDE_MAX as u32 {
                    return Err(Error::invalid(format!(
                        "symbol {symbol} exceeds the escape range of +-{RAW_MAGNITUDE_MAX}"
                    )));
                }
                let raw = ((symbol < 0) as u32) << 15 | mag;
                let esc = cdf.escape_index();
                let c = cdf.cumulative();
                self.encode_range(c[esc], c[esc + 1]);
                for byte in [raw >> 8, raw & 0xFF] {
                    self.encode_range(byte << 8, (byte + 1) << 8);
                }
                self.escapes += 1;
                self.count += 1;
                return Ok(());
            }
        };
        let c = cdf.cumulative();
        self.encode_range(c[idx], c[idx + 1]);
        self.count += 1;
        Ok(())
    }

    /// Number of escaped symbols so far.
    pub fn escapes(&self) -> usize {
        self.escapes
    }

    pub fn finish(mut self) -> CodedPayload {
        for _ in 0..5 {
            self.shift_low();
        }
        CodedPayload {
            bytes: self.out,
            count: self.count,
        }
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    bytes: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            bytes,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        if d.code >= d.range {
            return Err(Error::format("range coder payload is corrupt"));
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode_index(&mut self, cum: &[u32], lookup: impl Fn(u32) -> usize) -> usize {
        let r = self.range as u64;
        let target = ((((self.code as u64) + 1) << 16) - 1) / r;
        let idx = lookup(target as u32);
        let a = (r * cum[idx] as u64) >> 16;
        let b = (r * cum[idx + 1] as u64) >> 16;
        self.code -= a as u32;
        self.range = (b - a) as u32;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte() as u32;
        }
        idx
    }

    pub fn decode(&mut self, cdf: &QuantizedCdf) -> Result<i32> {
        let idx = self.decode_index(cdf.cumulative(), |t| cdf.lookup(t));
        if idx != cdf.escape_index() {
            return Ok(cdf.offset() + idx as i32);
        }
        let byte_table: Vec<u32> = (0..=256).map(|b| b << 8).collect();
        let hi = self.decode_index(&byte_table, |t| (t >> 8) as usize) as u32;
        let lo = self.decode_index(&byte_table, |t| (t >> 8) as usize) as u32;
        let raw = hi << 8 | lo;
        let mag = (raw & 0x7FFF) as i32;
        let v = if raw >> 15 == 1 { -mag } else { mag };
        if cdf.index_of(v).is_some() {
            return Err(Error::format("escaped symbol lies inside the table"));
        }
        Ok(v)
    }

    /// Verifies that the payload ends exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        if self.pos > self.bytes.len() {
            return Err(Error::Truncated(format!(
                "range coder payload has {} bytes, expected {}",
                self.bytes.len(),
                self.pos
            )));
        }
        if self.pos < self.bytes.len() {
            return Err(Error::format(format!(
                "range coder payload has {} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Codes `symbols[i]` under `cdfs[i]`.
pub fn encode_symbols(symbols: &[i32], cdfs: &[&QuantizedCdf]) -> Result<CodedPayload> {
    if symbols.len() != cdfs.len() {
        return Err(Error::invalid(format!(
            "{} symbols but {} tables",
            symbols.len(),
            cdfs.len()
        )));
    }
    let mut enc = RangeEncoder::new();
    for (&s, cdf) in symbols.iter().zip(cdfs) {
        enc.encode(s, cdf)?;
    }
    Ok(enc.finish())
}

pub fn decode_symbols(payload: &CodedPayload, cdfs: &[&QuantizedCdf]) -> Result<Vec<i32>> {
    if payload.count != cdfs.len() {
        return Err(Error::invalid(format!(
            "payload holds {} symbols but {} tables were given",
            payload.count,
            cdfs.len()
        )));
    }
    let mut dec = RangeDecoder::new(&payload.bytes)?;
    let out = cdfs.iter().map(|c| dec.decode(c)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}
