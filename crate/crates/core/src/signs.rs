//! Bit-packed `{-1, +1}` vectors.
//!
//! Entry `i` lives in bit `i % 64` of word `i / 64`. A set bit encodes `-1`,
//! a clear bit `+1`. Bits past `len` are always clear.

use rand::RngCore;

use crate::error::{Error, Result};

pub(crate) const WORD_BITS: usize = 64;

#[inline]
pub(crate) fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SignVector {
    len: usize,
    words: Vec<u64>,
}

impl SignVector {
    /// All `+1`.
    pub fn positive(len: usize) -> Self {
        Self {
            len,
            words: vec![0; words_for(len)],
        }
    }

    /// Packs a vector whose entries are exactly `-1.0` or `+1.0`.
    pub fn pack(values: &[f64]) -> Result<Self> {
        let mut out = Self::positive(values.len());
        for (i, &v) in values.iter().enumerate() {
            if v == -1.0 {
                out.set_negative(i, true);
            } else if v != 1.0 {
                return Err(Error::InvalidSign { index: i, value: v });
            }
        }
        Ok(out)
    }

    /// Sign pattern of `x` with `sgn(0) = +1`.
    pub fn sgn(x: &[f64]) -> Result<Self> {
        if let Some(i) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self::sgn_unchecked(x))
    }

    pub(crate) fn sgn_unchecked(x: &[f64]) -> Self {
        let mut words = vec![0u64; words_for(x.len())];
        for (word, chunk) in words.iter_mut().zip(x.chunks(WORD_BITS)) {
            let mut w = 0u64;
            for (b, &v) in chunk.iter().enumerate() {
                w |= ((v < 0.0) as u64) << b;
            }
            *word = w;
        }
        Self { len: x.len(), words }
    }

    pub fn from_fn(len: usize, mut negative: impl FnMut(usize) -> bool) -> Self {
        let mut out = Self::positive(len);
        for i in 0..len {
            if negative(i) {
                out.set_negative(i, true);
            }
        }
        out
    }

    /// Builds from packed words, clearing any bits past `len`.
    pub fn from_words(len: usize, mut words: Vec<u64>) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch {
                expected: words_for(len),
                actual: words.len(),
            });
        }
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Ok(Self { len, words })
    }

    /// Uniformly random signs.
    pub fn random(len: usize, rng: &mut impl RngCore) -> Self {
        let mut words: Vec<u64> = (0..words_for(len)).map(|_| rng.next_u64()).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(len);
        }
        Self { len, words }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn is_negative(&self, i: usize) -> bool {
        debug_assert!(i < self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Entry `i` as `±1.0`.
    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        if self.is_negative(i) {
            -1.0
        } else {
            1.0
        }
    }

    pub fn set_negative(&mut self, i: usize, negative: bool) {
        assert!(i < self.len);
        let bit = 1u64 << (i % WORD_BITS);
        if negative {
            self.words[i / WORD_BITS] |= bit;
        } else {
            self.words[i / WORD_BITS] &= !bit;
        }
    }

    pub fn unpack(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn negated(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        if let Some(last) = words.last_mut() {
            *last &= tail_mask(self.len);
        }
        Self {
            len: self.len,
            words,
        }
    }

    pub fn count_negative(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// `<self, other>` as an integer: `len - 2 * popcount(self ^ other)`.
    pub fn dot(&self, other: &SignVector) -> i64 {
        debug_assert_eq!(self.len, other.len);
        let differ: u64 = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as u64)
            .sum();
        self.len as i64 - 2 * differ as i64
    }

    /// Row-major outer product: entry `i * other.len() + j` is `self[i] * other[j]`.
    pub fn kron(&self, other: &SignVector) -> SignVector {
        let len = self.len * other.len;
        let mut out = SignVector::positive(len);
        let negated = other.negated();
        for i in 0..self.len {
            let src = if self.is_negative(i) { &negated } else { other };
            copy_bits(&mut out.words, i * other.len, &src.words, other.len);
        }
        out
    }

    /// Kronecker product of a sequence, with the empty product being the
    /// length-1 all-plus vector.
    pub fn kron_all<'a>(vectors: impl IntoIterator<Item = &'a SignVector>) -> SignVector {
        vectors
            .into_iter()
            .fold(SignVector::positive(1), |acc, v| acc.kron(v))
    }

    /// Indices where `self` and `old` differ, split by the new sign.
    pub(crate) fn flips_from(&self, old: &SignVector) -> (Vec<usize>, Vec<usize>) {
        let mut to_neg = Vec::new();
        let mut to_pos = Vec::new();
        for (u, (&new, &prev)) in self.words.iter().zip(&old.words).enumerate() {
            let mut diff = new ^ prev;
            while diff != 0 {
                let b = diff.trailing_zeros() as usize;
                diff &= diff - 1;
                let i = u * WORD_BITS + b;
                if (new >> b) & 1 == 1 {
                    to_neg.push(i);
                } else {
                    to_pos.push(i);
                }
            }
        }
        (to_neg, to_pos)
    }
}

#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => !0,
        r => (1u64 << r) - 1,
    }
}

/// Writes `nbits` bits of `src` into `dst` starting at bit offset `offset`.
/// Destination bits in the range must be clear.
fn copy_bits(dst: &mut [u64], offset: usize, src: &[u64], nbits: usize) {
    let shift = offset % WORD_BITS;
    let base = offset / WORD_BITS;
    for (u, &w) in src.iter().enumerate().take(words_for(nbits)) {
        let w = if (u + 1) * WORD_BITS > nbits {
            w & tail_mask(nbits)
        } else {
            w
        };
        dst[base + u] |= w << shift;
        if shift != 0 && base + u + 1 < dst.len() {
            dst[base + u + 1] |= w >> (WORD_BITS - shift);
        }
    }
}

/// Columns of `{-1, +1}` vectors sharing one length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SignMatrix {
    rows: usize,
    columns: Vec<SignVector>,
}

impl SignMatrix {
    pub fn new(rows: usize) -> Self {
        Self {
            rows,
            columns: Vec::new(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn push(&mut self, column: SignVector) -> Result<()> {
        if column.len() != self.rows {
            return Err(Error::LengthMismatch {
                expected: self.rows,
                actual: column.len(),
            });
        }
        self.columns.push(column);
        Ok(())
    }

    pub fn column(&self, j: usize) -> &SignVector {
        &self.columns[j]
    }

    pub fn columns(&self) -> &[SignVector] {
        &self.columns
    }

    pub fn truncate(&mut self, width: usize) {
        self.columns.truncate(width);
    }
}
