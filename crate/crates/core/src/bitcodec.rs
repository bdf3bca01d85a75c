//! Dense serialization of `b`-bit codes.
//!
//! Code `i` occupies stream bits `[i*b, (i+1)*b)`, least significant bit
//! first within each byte. A code that does not fit in the remainder of its
//! byte is split: the low-order bits go into the current byte and the overflow
//! bits into the start of the next one. The payload is always followed by a
//! single zero guard byte so that the two-byte lookahead used when decoding
//! never reads past the buffer, even for the last code.

use thiserror::Error;

pub const MAX_BIT_WIDTH: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("bit width {0} outside 1..=8")]
    BitWidth(u8),
    #[error("code {code} at position {index} does not fit in {bit_width} bits")]
    CodeOutOfRange {
        index: usize,
        code: u8,
        bit_width: u8,
    },
    #[error("packed buffer holds {actual} bytes, {expected} required for {count} codes of {bit_width} bits")]
    Truncated {
        count: usize,
        bit_width: u8,
        expected: usize,
        actual: usize,
    },
    #[error("code range {start}..{end} exceeds the {count} codes in the buffer")]
    RangeOutOfBounds {
        start: usize,
        end: usize,
        count: usize,
    },
}

/// Number of payload bytes needed for `count` codes of `bit_width` bits.
#[inline]
pub fn payload_len(count: usize, bit_width: u8) -> usize {
    (count * bit_width as usize).div_ceil(8)
}

/// Bits needed to index `clusters` distinct values (at least one).
pub fn bits_for_clusters(clusters: usize) -> u8 {
    let mut bits = 0u8;
    while (1usize << bits) < clusters {
        bits += 1;
    }
    bits.max(1)
}

fn check_width(bit_width: u8) -> Result<(), CodecError> {
    if (1..=MAX_BIT_WIDTH).contains(&bit_width) {
        Ok(())
    } else {
        Err(CodecError::BitWidth(bit_width))
    }
}

/// `count` codes of `bit_width` bits, serialized with a trailing guard byte.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PackedBuffer {
    bytes: Vec<u8>,
    count: usize,
    bit_width: u8,
}

impl PackedBuffer {
    /// Wraps an existing byte stream (payload plus guard byte).
    pub fn from_parts(bytes: Vec<u8>, count: usize, bit_width: u8) -> Result<Self, CodecError> {
        check_width(bit_width)?;
        let expected = payload_len(count, bit_width) + 1;
        if bytes.len() < expected {
            return Err(CodecError::Truncated {
                count,
                bit_width,
                expected,
                actual: bytes.len(),
            });
        }
        Ok(Self {
            bytes,
            count,
            bit_width,
        })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn bit_width(&self) -> u8 {
        self.bit_width
    }

    /// Payload followed by the guard byte.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Payload without the guard byte.
    pub fn payload(&self) -> &[u8] {
        &self.bytes[..payload_len(self.count, self.bit_width)]
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    /// Decodes a single code.
    #[inline]
    pub fn get(&self, index: usize) -> Option<u8> {
        (index < self.count)
            .then(|| read_code(&self.bytes, index * self.bit_width as usize, self.bit_width))
    }

    /// Decodes codes `start..start + out.len()` into `out`.
    pub fn unpack_range(&self, start: usize, out: &mut [u8]) -> Result<(), CodecError> {
        let end = start + out.len();
        if end > self.count {
            return Err(CodecError::RangeOutOfBounds {
                start,
                end,
                count: self.count,
            });
        }
        unpack_from(
            &self.bytes,
            start * self.bit_width as usize,
            self.bit_width,
            out,
        );
        Ok(())
    }
}

/// Serializes `codes` as a dense stream of `bit_width`-bit fields.
pub fn pack_bits(codes: &[u8], bit_width: u8) -> Result<PackedBuffer, CodecError> {
    check_width(bit_width)?;
    let b = bit_width as usize;
    if let Some((index, &code)) = codes
        .iter()
        .enumerate()
        .find(|(_, &c)| (c as u32) >> bit_width != 0)
    {
        return Err(CodecError::CodeOutOfRange {
            index,
            code,
            bit_width,
        });
    }

    // Packing ORs into place, so the buffer starts zeroed; the extra byte is the guard.
    let mut out = vec![0u8; payload_len(codes.len(), bit_width) + 1];
    let mut bit_off = 0usize;
    for &code in codes {
        let v = code as u32;
        let j = bit_off >> 3;
        let sh = bit_off & 7;
        out[j] |= ((v << sh) & 0xFF) as u8;
        if sh + b > 8 {
            out[j + 1] |= ((v >> (8 - sh)) & 0xFF) as u8;
        }
        bit_off += b;
    }
    Ok(PackedBuffer {
        bytes: out,
        count: codes.len(),
        bit_width,
    })
}

/// Decodes every code in `buf`.
pub fn unpack_bits(buf: &PackedBuffer) -> Vec<u8> {
    let mut out = vec![0u8; buf.count];
    unpack_from(&buf.bytes, 0, buf.bit_width, &mut out);
    out
}

/// Decodes `count` codes from a raw payload-plus-guard byte slice.
pub fn unpack_slice(bytes: &[u8], count: usize, bit_width: u8) -> Result<Vec<u8>, CodecError> {
    check_width(bit_width)?;
    let expected = payload_len(count, bit_width) + 1;
    if bytes.len() < expected {
        return Err(CodecError::Truncated {
            count,
            bit_width,
            expected,
            actual: bytes.len(),
        });
    }
    let mut out = vec![0u8; count];
    unpack_from(bytes, 0, bit_width, &mut out);
    Ok(out)
}

#[inline(always)]
fn read_code(bytes: &[u8], bit_off: usize, bit_width: u8) -> u8 {
    let mask = (1u32 << bit_width) - 1;
    let j = bit_off >> 3;
    let sh = bit_off & 7;
    let chunk = bytes[j] as u32 | (bytes[j + 1] as u32) << 8;
    ((chunk >> sh) & mask) as u8
}

#[inline]
fn unpack_from(bytes: &[u8], mut bit_off: usize, bit_width: u8, out: &mut [u8]) {
    let b = bit_width as usize;
    for slot in out.iter_mut() {
        *slot = read_code(bytes, bit_off, bit_width);
        bit_off += b;
    }
}
