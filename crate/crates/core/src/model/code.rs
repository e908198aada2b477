use std::fmt;

use crate::error::{Error, Result};

/// A binary hash code of `len` bits, packed 64 to a word with bit `i` in
/// word `i / 64` at position `i % 64`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct HashCode {
    len: usize,
    words: Vec<u64>,
}

impl HashCode {
    pub fn zeros(len: usize) -> Self {
        Self { len, words: vec![0; len.div_ceil(64)] }
    }

    pub fn from_bools(bits: impl IntoIterator<Item = bool>) -> Self {
        let mut words = Vec::new();
        let mut len = 0;
        for (i, b) in bits.into_iter().enumerate() {
            if i % 64 == 0 {
                words.push(0);
            }
            if b {
                words[i / 64] |= 1 << (i % 64);
            }
            len = i + 1;
        }
        Self { len, words }
    }

    /// Codes from values in {0, 1}; anything else is rejected.
    pub fn from_bits(bits: &[f32]) -> Result<Self> {
        if let Some(i) = bits.iter().position(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::Domain { op: "hash_code", detail: format!("bit {i} is {}, not 0 or 1", bits[i]) });
        }
        Ok(Self::from_bools(bits.iter().map(|&b| b == 1.0)))
    }

    /// Sign quantization with `sgn(0) = +1`.
    pub fn from_signs(values: &[f32]) -> Self {
        Self::from_bools(values.iter().map(|&v| v >= 0.0))
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for a {}-bit code", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn bits(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.bit(i) as u8).collect()
    }

    /// The code as `2·bits − 1`.
    pub fn signed(&self) -> Vec<f32> {
        (0..self.len).map(|i| if self.bit(i) { 1.0 } else { -1.0 }).collect()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn hamming(&self, other: &HashCode) -> u32 {
        assert_eq!(self.len, other.len, "codes of different lengths");
        self.words.iter().zip(&other.words).map(|(a, b)| (a ^ b).count_ones()).sum()
    }

    /// `⌈len/8⌉` bytes, bit `i` at byte `i / 8`, position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Result<Self> {
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::Format(format!("{} bytes cannot hold exactly a {len}-bit code", bytes.len())));
        }
        if !len.is_multiple_of(8) && bytes[bytes.len() - 1] >> (len % 8) != 0 {
            return Err(Error::Format("padding bits of a packed code are set".into()));
        }
        let mut words = vec![0u64; len.div_ceil(64)];
        for (i, &b) in bytes.iter().enumerate() {
            words[i / 8] |= (b as u64) << (8 * (i % 8));
        }
        Ok(Self { len, words })
    }
}

impl fmt::Debug for HashCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = (0..self.len).map(|i| if self.bit(i) { '1' } else { '0' }).collect();
        write!(f, "HashCode({s})")
    }
}
