//! Canonical Huffman coding over the 256 byte values.
//!
//! The Verifier builds a table from byte frequencies of earlier logs; the
//! Prover only looks codes up. Tables are always complete (the Kraft sum is
//! exactly one) so any byte sequence can be encoded, including bytes that
//! never appeared in training.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::bitstream::{BitStream, BitStreamError};

/// Alphabet size: one symbol per byte value.
pub const SYMBOLS: usize = 256;

/// Longest codeword a table may hold.
pub const MAX_CODE_LEN: u8 = 32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HuffmanError {
    #[error("symbol {symbol} has code length {len}, allowed 1..=32")]
    BadLength { symbol: usize, len: u8 },
    #[error("code lengths violate the Kraft equality")]
    Kraft,
    #[error("table blob is {got} bytes, expected {want}")]
    BlobSize { got: usize, want: usize },
    #[error("packed code of symbol {0} disagrees with its canonical code")]
    InconsistentCode(usize),
    #[error("table blob has non-zero padding")]
    DirtyPadding,
    #[error("bit stream ends inside a codeword at bit {0}")]
    TruncatedCode(u32),
    #[error(transparent)]
    BitStream(#[from] BitStreamError),
}

/// Optimal prefix-code lengths for arbitrary positive weights.
///
/// Lengths come from a Huffman merge with deterministic tie-breaking and are
/// then reassigned in sorted order, so a heavier symbol never gets a longer
/// code than a lighter one and equal weights favour the lower index.
pub fn code_lengths(weights: &[u64]) -> Vec<u8> {
    let n = weights.len();
    match n {
        0 => return Vec::new(),
        1 => return vec![1],
        _ => {}
    }
    // leaves are 0..n, internal nodes n..2n-1; ties pop the lower index first
    let mut parent = vec![usize::MAX; 2 * n - 1];
    let mut heap: BinaryHeap<Reverse<(u128, usize)>> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| Reverse((w as u128, i)))
        .collect();
    let mut next = n;
    while heap.len() > 1 {
        let Reverse((w1, a)) = heap.pop().expect("len > 1");
        let Reverse((w2, b)) = heap.pop().expect("len > 1");
        parent[a] = next;
        parent[b] = next;
        heap.push(Reverse((w1 + w2, next)));
        next += 1;
    }
    let root = next - 1;
    let mut depth = vec![0u32; 2 * n - 1];
    for node in (0..root).rev() {
        depth[node] = depth[parent[node]] + 1;
    }
    let mut lengths: Vec<u32> = depth[..n].to_vec();
    lengths.sort_unstable();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (Reverse(weights[i]), i));
    let mut out = vec![0u8; n];
    for (rank, &sym) in order.iter().enumerate() {
        out[sym] = u8::try_from(lengths[rank]).unwrap_or(u8::MAX);
    }
    out
}

/// Canonical codewords for the given lengths: ordered by (length, symbol).
fn canonical_codes(lengths: &[u8]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by_key(|&s| (lengths[s], s));
    let mut codes = vec![0u32; lengths.len()];
    let mut code: u64 = 0;
    let mut prev_len = lengths.get(order[0]).copied().unwrap_or(0);
    for &s in &order {
        code <<= lengths[s] - prev_len;
        prev_len = lengths[s];
        codes[s] = code as u32;
        code += 1;
    }
    codes
}

/// A complete canonical code table over all 256 byte values.
#[derive(Clone, PartialEq, Eq)]
pub struct HuffmanTable {
    lengths: [u8; SYMBOLS],
    codes: [u32; SYMBOLS],
    // decoding index: symbols sorted by (length, symbol) and, per length,
    // the first canonical code and its offset into `sorted`
    sorted: [u8; SYMBOLS],
    first_code: [u64; MAX_CODE_LEN as usize + 1],
    first_index: [usize; MAX_CODE_LEN as usize + 1],
    count: [usize; MAX_CODE_LEN as usize + 1],
}

impl std::fmt::Debug for HuffmanTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HuffmanTable")
            .field("lengths", &&self.lengths[..])
            .finish_non_exhaustive()
    }
}

impl Default for HuffmanTable {
    fn default() -> Self {
        Self::uniform()
    }
}

impl HuffmanTable {
    /// The fixed 8-bit code: every byte maps to itself.
    pub fn uniform() -> Self {
        Self::from_lengths([8; SYMBOLS]).expect("uniform lengths are complete")
    }

    /// Builds the table for `frequencies` after adding one to every count.
    pub fn build(frequencies: &[u64; SYMBOLS]) -> Self {
        let mut weights: Vec<u64> = frequencies.iter().map(|&c| c.saturating_add(1)).collect();
        loop {
            let lengths = code_lengths(&weights);
            if lengths.iter().all(|&l| l <= MAX_CODE_LEN) {
                let lengths: [u8; SYMBOLS] = lengths.try_into().expect("256 lengths");
                return Self::from_lengths(lengths).expect("huffman lengths are complete");
            }
            // only reachable with Fibonacci-like counts in the millions
            for w in &mut weights {
                *w = w.div_ceil(2);
            }
        }
    }

    /// Assigns canonical codes to a complete set of lengths.
    pub fn from_lengths(lengths: [u8; SYMBOLS]) -> Result<Self, HuffmanError> {
        for (symbol, &len) in lengths.iter().enumerate() {
            if !(1..=MAX_CODE_LEN).contains(&len) {
                return Err(HuffmanError::BadLength { symbol, len });
            }
        }
        let kraft: u64 = lengths
            .iter()
            .map(|&l| 1u64 << (MAX_CODE_LEN - l))
            .sum();
        if kraft != 1u64 << MAX_CODE_LEN {
            return Err(HuffmanError::Kraft);
        }
        let codes_vec = canonical_codes(&lengths);
        let mut codes = [0u32; SYMBOLS];
        codes.copy_from_slice(&codes_vec);

        let mut order: Vec<usize> = (0..SYMBOLS).collect();
        order.sort_by_key(|&s| (lengths[s], s));
        let mut sorted = [0u8; SYMBOLS];
        for (i, &s) in order.iter().enumerate() {
            sorted[i] = s as u8;
        }
        let mut count = [0usize; MAX_CODE_LEN as usize + 1];
        for &l in &lengths {
            count[l as usize] += 1;
        }
        let mut first_code = [0u64; MAX_CODE_LEN as usize + 1];
        let mut first_index = [0usize; MAX_CODE_LEN as usize + 1];
        let mut code = 0u64;
        let mut index = 0usize;
        for len in 1..=MAX_CODE_LEN as usize {
            first_code[len] = code;
            first_index[len] = index;
            code = (code + count[len] as u64) << 1;
            index += count[len];
        }
        Ok(HuffmanTable {
            lengths,
            codes,
            sorted,
            first_code,
            first_index,
            count,
        })
    }

    pub fn lengths(&self) -> &[u8; SYMBOLS] {
        &self.lengths
    }

    pub fn codes(&self) -> &[u32; SYMBOLS] {
        &self.codes
    }

    /// `(code, length)` of one byte value.
    pub fn code(&self, symbol: u8) -> (u32, u8) {
        (self.codes[symbol as usize], self.lengths[symbol as usize])
    }

    pub fn encode_into(&self, bytes: &[u8], out: &mut BitStream) {
        for &b in bytes {
            let (code, len) = self.code(b);
            out.append(code, len).expect("table lengths are 1..=32");
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> BitStream {
        let mut out = BitStream::new();
        self.encode_into(bytes, &mut out);
        out
    }

    /// Decodes a stream that must end exactly on a codeword boundary.
    pub fn decode(&self, stream: &BitStream) -> Result<Vec<u8>, HuffmanError> {
        let mut out = Vec::new();
        let mut reader = stream.reader();
        while reader.remaining() > 0 {
            let start = reader.position();
            let mut code = 0u64;
            let mut len = 0usize;
            loop {
                let bit = reader
                    .read_bit()
                    .ok_or(HuffmanError::TruncatedCode(start))?;
                code = (code << 1) | bit as u64;
                len += 1;
                let offset = code.wrapping_sub(self.first_code[len]);
                if code >= self.first_code[len] && offset < self.count[len] as u64 {
                    out.push(self.sorted[self.first_index[len] + offset as usize]);
                    break;
                }
                debug_assert!(len < MAX_CODE_LEN as usize, "complete code always resolves");
            }
        }
        Ok(out)
    }

    /// Sum of all code lengths, in bits.
    pub fn total_code_bits(&self) -> u64 {
        self.lengths.iter().map(|&l| l as u64).sum()
    }

    /// Serialized size: 256 length bytes plus the bit-packed codes.
    pub fn blob_len(&self) -> usize {
        SYMBOLS + self.total_code_bits().div_ceil(8) as usize
    }

    /// Mean code length in bits under the given symbol weights.
    pub fn average_length(&self, weights: &[u64; SYMBOLS]) -> f64 {
        let total: u64 = weights.iter().sum();
        if total == 0 {
            return 0.0;
        }
        let bits: u128 = weights
            .iter()
            .zip(self.lengths.iter())
            .map(|(&w, &l)| w as u128 * l as u128)
            .sum();
        bits as f64 / total as f64
    }

    /// 256 length bytes, then every codeword in symbol order, MSB-first,
    /// zero-padded to a whole byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut packed = BitStream::new();
        for s in 0..SYMBOLS {
            packed
                .append(self.codes[s], self.lengths[s])
                .expect("valid length");
        }
        let mut out = Vec::with_capacity(self.blob_len());
        out.extend_from_slice(&self.lengths);
        out.extend_from_slice(packed.as_bytes());
        out
    }

    /// Parses a blob and checks that the packed codes equal the canonical
    /// codes implied by the lengths.
    pub fn from_bytes(blob: &[u8]) -> Result<Self, HuffmanError> {
        if blob.len() < SYMBOLS {
            return Err(HuffmanError::BlobSize {
                got: blob.len(),
                want: SYMBOLS,
            });
        }
        let lengths: [u8; SYMBOLS] = blob[..SYMBOLS].try_into().expect("256 bytes");
        for (symbol, &len) in lengths.iter().enumerate() {
            if !(1..=MAX_CODE_LEN).contains(&len) {
                return Err(HuffmanError::BadLength { symbol, len });
            }
        }
        let table = Self::from_lengths(lengths)?;
        let want = table.blob_len();
        if blob.len() != want {
            return Err(HuffmanError::BlobSize {
                got: blob.len(),
                want,
            });
        }
        let packed = BitStream::from_parts(
            blob[SYMBOLS..].to_vec(),
            table.total_code_bits() as u32,
        )
        .map_err(|_| HuffmanError::DirtyPadding)?;
        let mut reader = packed.reader();
        for (s, &len) in lengths.iter().enumerate() {
            let mut code = 0u32;
            for _ in 0..len {
                code = (code << 1) | reader.read_bit().expect("sized above") as u32;
            }
            if code != table.codes[s] {
                return Err(HuffmanError::InconsistentCode(s));
            }
        }
        Ok(table)
    }
}

/// Byte histogram of one or more streams.
pub fn byte_frequencies<'a>(streams: impl IntoIterator<Item = &'a [u8]>) -> [u64; SYMBOLS] {
    let mut freq = [0u64; SYMBOLS];
    for s in streams {
        for &b in s {
            freq[b as usize] += 1;
        }
    }
    freq
}
