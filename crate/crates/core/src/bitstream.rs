//! MSB-first bit packing for variable-length codewords.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BitStreamError {
    #[error("code length {0} outside 1..=32")]
    BadCodeLength(u8),
    #[error("bit length {bit_len} does not fit in {bytes} bytes")]
    BitLenOverflow { bit_len: u32, bytes: usize },
    #[error("padding bits after bit {0} are not zero")]
    DirtyPadding(u32),
}

/// A growable bit buffer. Bits are packed most-significant first; bits past
/// `bit_len` in the final byte are always zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BitStream {
    bytes: Vec<u8>,
    bit_len: u32,
}

impl BitStream {
    pub fn new() -> Self {
        Self::default()
    }

    /// Wraps an existing buffer, checking the padding invariant.
    pub fn from_parts(bytes: Vec<u8>, bit_len: u32) -> Result<Self, BitStreamError> {
        let needed = (bit_len as usize).div_ceil(8);
        if needed != bytes.len() {
            return Err(BitStreamError::BitLenOverflow {
                bit_len,
                bytes: bytes.len(),
            });
        }
        let used = bit_len % 8;
        if used != 0 {
            let last = bytes[bytes.len() - 1];
            if last & (0xFFu8 >> used) != 0 {
                return Err(BitStreamError::DirtyPadding(bit_len));
            }
        }
        Ok(BitStream { bytes, bit_len })
    }

    pub fn bit_len(&self) -> u32 {
        self.bit_len
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_parts(self) -> (Vec<u8>, u32) {
        (self.bytes, self.bit_len)
    }

    pub fn is_empty(&self) -> bool {
        self.bit_len == 0
    }

    /// Appends the low `len` bits of `code`, most-significant first.
    pub fn append(&mut self, code: u32, len: u8) -> Result<(), BitStreamError> {
        if !(1..=32).contains(&len) {
            return Err(BitStreamError::BadCodeLength(len));
        }
        let mut remaining = len as u32;
        let value = if len == 32 {
            code
        } else {
            code & ((1u32 << len) - 1)
        };
        while remaining > 0 {
            let used = self.bit_len % 8;
            if used == 0 {
                self.bytes.push(0);
            }
            let free = 8 - used;
            let take = free.min(remaining);
            // top `take` bits of the not-yet-written part of `value`
            let chunk = ((value >> (remaining - take)) & ((1u32 << take) - 1)) as u8;
            let last = self.bytes.len() - 1;
            self.bytes[last] |= chunk << (free - take);
            self.bit_len += take;
            remaining -= take;
        }
        Ok(())
    }

    /// Appends whole bytes.
    pub fn append_bytes(&mut self, bytes: &[u8]) {
        if self.bit_len.is_multiple_of(8) {
            self.bytes.extend_from_slice(bytes);
            self.bit_len += 8 * bytes.len() as u32;
        } else {
            for &b in bytes {
                self.append(b as u32, 8).expect("8 is a valid length");
            }
        }
    }

    pub fn bit(&self, index: u32) -> Option<bool> {
        if index >= self.bit_len {
            return None;
        }
        let byte = self.bytes[(index / 8) as usize];
        Some(byte & (0x80 >> (index % 8)) != 0)
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader {
            stream: self,
            pos: 0,
        }
    }
}

/// Sequential reader over a [`BitStream`].
#[derive(Debug, Clone)]
pub struct BitReader<'a> {
    stream: &'a BitStream,
    pos: u32,
}

impl BitReader<'_> {
    pub fn read_bit(&mut self) -> Option<bool> {
        let bit = self.stream.bit(self.pos)?;
        self.pos += 1;
        Some(bit)
    }

    pub fn position(&self) -> u32 {
        self.pos
    }

    pub fn remaining(&self) -> u32 {
        self.stream.bit_len - self.pos
    }
}
