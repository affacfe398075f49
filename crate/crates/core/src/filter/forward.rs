//! Exact forward index: per-slot feature groups with sorted value lists.

use std::ops::Range;

use crate::bitmask::BitMask;
use crate::catalog::{Catalog, FeatureValue};
use crate::ivf::{IvfIndex, PAD};

use super::expr::FilterExpr;

/// Flat layout: slot `s` owns feature groups `slot_groups[s]..slot_groups[s+1]`;
/// group `g` has id `feature_ids[g]` and values
/// `feature_values[feature_offsets[g]..feature_offsets[g+1]]`, sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardIndex {
    pub slot_groups: Vec<u32>,
    pub feature_ids: Vec<u64>,
    pub feature_offsets: Vec<u32>,
    pub feature_values: Vec<u64>,
    pub valid: BitMask,
}

impl ForwardIndex {
    /// `None` marks padding. Feature lists must be sorted by `(id, value)`,
    /// which [`crate::catalog::Item`] guarantees.
    pub fn build<'a, I>(slots: I) -> Self
    where
        I: IntoIterator<Item = Option<&'a [FeatureValue]>>,
        I::IntoIter: ExactSizeIterator,
    {
        let slots = slots.into_iter();
        let mut valid = BitMask::zeros(slots.len());
        let mut slot_groups = vec![0u32];
        let mut feature_ids = Vec::new();
        let mut feature_offsets = Vec::new();
        let mut feature_values = Vec::new();
        for (s, feats) in slots.enumerate() {
            if let Some(feats) = feats {
                valid.set(s, true);
                debug_assert!(feats.windows(2).all(|w| w[0] < w[1]));
                let first_group = feature_ids.len();
                for fv in feats {
                    if feature_ids.len() == first_group || *feature_ids.last().unwrap() != fv.feature_id {
                        feature_offsets.push(feature_values.len() as u32);
                        feature_ids.push(fv.feature_id);
                    }
                    feature_values.push(fv.value);
                }
            }
            slot_groups.push(feature_ids.len() as u32);
        }
        feature_offsets.push(feature_values.len() as u32);
        Self {
            slot_groups,
            feature_ids,
            feature_offsets,
            feature_values,
            valid,
        }
    }

    pub fn for_ivf(catalog: &Catalog, ivf: &IvfIndex) -> Self {
        let items = catalog.items();
        Self::build(
            ivf.perm()
                .iter()
                .map(|&p| (p != PAD).then(|| items[p as usize].features.as_slice())),
        )
    }

    pub fn for_catalog(catalog: &Catalog) -> Self {
        Self::build(catalog.items().iter().map(|it| Some(it.features.as_slice())))
    }

    pub fn n_slots(&self) -> usize {
        self.valid.len()
    }

    /// Exact membership test by binary search in the slot's sorted groups.
    pub fn has(&self, slot: usize, fv: FeatureValue) -> bool {
        let groups = self.slot_groups[slot] as usize..self.slot_groups[slot + 1] as usize;
        let ids = &self.feature_ids[groups.clone()];
        let Ok(g) = ids.binary_search(&fv.feature_id) else {
            return false;
        };
        let g = groups.start + g;
        let vals = &self.feature_values[self.feature_offsets[g] as usize..self.feature_offsets[g + 1] as usize];
        vals.binary_search(&fv.value).is_ok()
    }
}

/// Exact evaluation over valid slots (optionally a slot range).
pub fn forward_eval(fi: &ForwardIndex, expr: &FilterExpr, range: Option<Range<usize>>) -> BitMask {
    let range = range.unwrap_or(0..fi.n_slots());
    let mut out = BitMask::zeros(fi.n_slots());
    for s in range {
        if fi.valid.get(s) && expr.eval_with(&mut |fv| fi.has(s, fv)) {
            out.set(s, true);
        }
    }
    out
}
