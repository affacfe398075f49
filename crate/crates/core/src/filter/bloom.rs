//! Bloom signature index stored as transposed bit planes.
//!
//! Each slot carries an M-bit signature. Instead of storing signatures
//! row by row, bit `p` of every slot is packed into plane `p`, 64 slots per
//! word. A leaf term with query bits `{p1..pk}` is then the word-wise AND of
//! planes `p1..pk`: one AND decides 64 slots, and planes for query bits
//! that are zero are never touched.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bitmask::{words_for, BitMask, WORD_BITS};
use crate::catalog::{Catalog, FeatureValue};
use crate::hash::{fnv1a64, splitmix64_mix};
use crate::ivf::{IvfIndex, PAD};

use super::FilterError;

/// Hash recipe tag persisted in snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u32)]
pub enum HashScheme {
    /// `h1 = fnv1a64(le(feature_id) || le(value))`,
    /// `h2 = splitmix64_mix(h1) | 1`,
    /// `pos_i = (h1 + i * h2) mod M` in wrapping u64 arithmetic.
    Fnv1aSplitMix = 1,
    /// Same `h1`, `h2`, then every probe is remixed:
    /// `pos_i = splitmix64_mix(h1 + i * h2) mod M`.
    ///
    /// Under scheme 1 a leaf's position set is fixed by `(h1 mod M, h2 mod M)`,
    /// so there are only about `M^2 / 2` distinct sets. An absent term that
    /// lands on a present term's set matches every item carrying that term,
    /// which puts a floor of roughly `4n / M^2` under the false positive
    /// rate. Remixing each probe removes the floor.
    Fnv1aSplitMixRemix = 2,
}

impl HashScheme {
    pub fn from_id(id: u32) -> Option<Self> {
        match id {
            1 => Some(Self::Fnv1aSplitMix),
            2 => Some(Self::Fnv1aSplitMixRemix),
            _ => None,
        }
    }

    pub fn id(self) -> u32 {
        self as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BloomParams {
    pub m_bits: u32,
    pub k_hashes: u32,
    pub scheme: HashScheme,
}

impl BloomParams {
    pub fn new(m_bits: u32, k_hashes: u32) -> Result<Self, FilterError> {
        if m_bits == 0 || k_hashes == 0 {
            return Err(FilterError::InvalidParams(format!(
                "bloom needs M >= 1 and K >= 1, got M={m_bits} K={k_hashes}"
            )));
        }
        Ok(Self {
            m_bits,
            k_hashes,
            scheme: HashScheme::Fnv1aSplitMixRemix,
        })
    }

    pub fn with_scheme(self, scheme: HashScheme) -> Self {
        Self { scheme, ..self }
    }
}

impl Default for BloomParams {
    fn default() -> Self {
        Self {
            m_bits: 1024,
            k_hashes: 5,
            scheme: HashScheme::Fnv1aSplitMixRemix,
        }
    }
}

/// Bit positions a single `(feature, value)` term sets, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryBloom {
    pub set_bits: Vec<u32>,
}

pub fn hash_positions(fv: FeatureValue, params: &BloomParams) -> QueryBloom {
    let mut input = [0u8; 16];
    input[..8].copy_from_slice(&fv.feature_id.to_le_bytes());
    input[8..].copy_from_slice(&fv.value.to_le_bytes());
    let h1 = fnv1a64(&input);
    let h2 = splitmix64_mix(h1) | 1;
    let m = params.m_bits as u64;
    let mut set_bits: Vec<u32> = (0..params.k_hashes as u64)
        .map(|i| {
            let h = h1.wrapping_add(i.wrapping_mul(h2));
            let h = match params.scheme {
                HashScheme::Fnv1aSplitMix => h,
                HashScheme::Fnv1aSplitMixRemix => splitmix64_mix(h),
            };
            (h % m) as u32
        })
        .collect();
    set_bits.sort_unstable();
    set_bits.dedup();
    QueryBloom { set_bits }
}

/// `(1 - (1 - 1/M)^(K n))^K`: probability that a term absent from an item
/// with `n` inserted terms still tests positive.
pub fn bloom_fpr_theoretical(params: &BloomParams, n_inserted: usize) -> f64 {
    let m = params.m_bits as f64;
    let k = params.k_hashes as f64;
    let p_set = 1.0 - (1.0 - 1.0 / m).powf(k * n_inserted as f64);
    p_set.powf(k)
}

/// `max_feature_values * k_hashes * collision_buffer`, a rule of thumb for M.
pub fn suggested_bits(max_feature_values: usize, k_hashes: usize, collision_buffer: usize) -> usize {
    max_feature_values * k_hashes * collision_buffer
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BloomIndex {
    params: BloomParams,
    /// Plane-major: plane `p` occupies `planes[p * n_words..(p + 1) * n_words]`.
    planes: Vec<u64>,
    n_slots: usize,
    n_words: usize,
}

impl BloomIndex {
    /// Builds planes from per-slot feature lists; `None` marks a padding slot.
    pub fn build<'a, I>(slots: I, params: BloomParams) -> Self
    where
        I: IntoIterator<Item = Option<&'a [FeatureValue]>>,
        I::IntoIter: ExactSizeIterator,
    {
        let slots = slots.into_iter();
        let n_slots = slots.len();
        let n_words = words_for(n_slots);
        let mut planes = vec![0u64; params.m_bits as usize * n_words];
        for (s, feats) in slots.enumerate() {
            let Some(feats) = feats else { continue };
            let (w, bit) = (s / WORD_BITS, 1u64 << (s % WORD_BITS));
            for &fv in feats {
                for p in hash_positions(fv, &params).set_bits {
                    planes[p as usize * n_words + w] |= bit;
                }
            }
        }
        Self {
            params,
            planes,
            n_slots,
            n_words,
        }
    }

    /// Slot order of `ivf`, so masks line up with the IVF scan.
    pub fn for_ivf(catalog: &Catalog, ivf: &IvfIndex, params: BloomParams) -> Self {
        let items = catalog.items();
        Self::build(
            ivf.perm()
                .iter()
                .map(|&p| (p != PAD).then(|| items[p as usize].features.as_slice())),
            params,
        )
    }

    /// Identity slot order.
    pub fn for_catalog(catalog: &Catalog, params: BloomParams) -> Self {
        Self::build(catalog.items().iter().map(|it| Some(it.features.as_slice())), params)
    }

    pub fn from_parts(params: BloomParams, planes: Vec<u64>, n_slots: usize) -> Result<Self, FilterError> {
        let n_words = words_for(n_slots);
        if planes.len() != params.m_bits as usize * n_words {
            return Err(FilterError::InvalidParams(format!(
                "plane storage has {} words, expected {}",
                planes.len(),
                params.m_bits as usize * n_words
            )));
        }
        Ok(Self {
            params,
            planes,
            n_slots,
            n_words,
        })
    }

    pub fn params(&self) -> &BloomParams {
        &self.params
    }

    pub fn n_slots(&self) -> usize {
        self.n_slots
    }

    pub fn n_words(&self) -> usize {
        self.n_words
    }

    pub fn plane(&self, p: usize) -> &[u64] {
        &self.planes[p * self.n_words..(p + 1) * self.n_words]
    }

    pub fn raw_planes(&self) -> &[u64] {
        &self.planes
    }

    /// `M * ceil(n_slots / 64) * 8`.
    pub fn plane_bytes(&self) -> usize {
        self.planes.len() * std::mem::size_of::<u64>()
    }

    /// Whether slot `s` carries bit `p` in its signature.
    pub fn bit(&self, p: usize, s: usize) -> bool {
        (self.plane(p)[s / WORD_BITS] >> (s % WORD_BITS)) & 1 == 1
    }

    /// Leaf match over a word range into `out` (`out.len() == words.len()`).
    /// Returns the number of plane words read: `|set_bits| * words.len()`.
    pub fn eval_leaf_words(&self, qb: &QueryBloom, words: Range<usize>, out: &mut [u64]) -> usize {
        debug_assert_eq!(out.len(), words.len());
        let Some((&first, rest)) = qb.set_bits.split_first() else {
            out.fill(u64::MAX);
            return 0;
        };
        out.copy_from_slice(&self.plane(first as usize)[words.clone()]);
        for &p in rest {
            for (o, w) in out.iter_mut().zip(&self.plane(p as usize)[words.clone()]) {
                *o &= w;
            }
        }
        qb.set_bits.len() * words.len()
    }

    /// Leaf match over every slot into `scratch`. An empty query bloom
    /// yields all ones; callers restrict to valid slots.
    pub fn eval_leaf(&self, qb: &QueryBloom, scratch: &mut BitMask) -> usize {
        assert_eq!(scratch.len(), self.n_slots);
        let read = self.eval_leaf_words(qb, 0..self.n_words, scratch.words_mut());
        // planes are zero past n_slots except for the empty-query fill
        let tail = self.n_slots % WORD_BITS;
        if tail != 0 {
            if let Some(last) = scratch.words_mut().last_mut() {
                *last &= (1u64 << tail) - 1;
            }
        }
        read
    }
}

pub fn bloom_eval_leaf(index: &BloomIndex, qb: &QueryBloom, scratch: &mut BitMask) -> usize {
    index.eval_leaf(qb, scratch)
}
