//! Packed bit vector over slots, 64 slots per word.
//!
//! Slot `s` lives in word `s / 64`, bit `s % 64`. Bits past `len` in the
//! last word are always zero.

use std::ops::Range;

pub const WORD_BITS: usize = 64;

#[inline]
pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD_BITS)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    words: Vec<u64>,
    len: usize,
}

impl BitMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut m = Self {
            words: vec![u64::MAX; words_for(len)],
            len,
        };
        m.clear_tail();
        m
    }

    /// Builds a mask from raw words; tail bits beyond `len` are cleared.
    pub fn from_words(mut words: Vec<u64>, len: usize) -> Self {
        words.resize(words_for(len), 0);
        let mut m = Self { words, len };
        m.clear_tail();
        m
    }

    pub fn from_slots(len: usize, slots: impl IntoIterator<Item = usize>) -> Self {
        let mut m = Self::zeros(len);
        for s in slots {
            m.set(s, true);
        }
        m
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn words_mut(&mut self) -> &mut [u64] {
        &mut self.words
    }

    pub fn into_words(self) -> Vec<u64> {
        self.words
    }

    #[inline]
    pub fn get(&self, slot: usize) -> bool {
        debug_assert!(slot < self.len);
        (self.words[slot / WORD_BITS] >> (slot % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, slot: usize, on: bool) {
        assert!(slot < self.len, "slot {slot} out of range {}", self.len);
        let bit = 1u64 << (slot % WORD_BITS);
        if on {
            self.words[slot / WORD_BITS] |= bit;
        } else {
            self.words[slot / WORD_BITS] &= !bit;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn and_assign(&mut self, other: &BitMask) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= b;
        }
    }

    pub fn or_assign(&mut self, other: &BitMask) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    /// Complement, then restrict to `valid`.
    pub fn not_within(&mut self, valid: &BitMask) {
        assert_eq!(self.len, valid.len);
        for (a, v) in self.words.iter_mut().zip(&valid.words) {
            *a = !*a & v;
        }
    }

    /// Zeroes every slot outside `range`.
    pub fn restrict_to(&mut self, range: Range<usize>) {
        let mut keep = BitMask::zeros(self.len);
        keep.fill_range(range);
        self.and_assign(&keep);
    }

    /// Sets every slot in `range`.
    pub fn fill_range(&mut self, range: Range<usize>) {
        assert!(range.end <= self.len);
        for s in range {
            self.words[s / WORD_BITS] |= 1u64 << (s % WORD_BITS);
        }
    }

    pub fn is_subset_of(&self, other: &BitMask) -> bool {
        self.len == other.len
            && self
                .words
                .iter()
                .zip(&other.words)
                .all(|(a, b)| a & !b == 0)
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * WORD_BITS + tz)
            })
        })
    }

    fn clear_tail(&mut self) {
        let rem = self.len % WORD_BITS;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }
}
