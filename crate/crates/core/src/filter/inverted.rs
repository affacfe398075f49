//! Posting-list baseline: `(feature, value)` → ascending slot list.

use std::collections::HashMap;

use crate::bitmask::BitMask;
use crate::catalog::{Catalog, FeatureValue};
use crate::ivf::{IvfIndex, PAD};

use super::expr::FilterExpr;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InvertedIndex {
    pub postings: HashMap<FeatureValue, Vec<u32>>,
    /// Every valid slot, ascending; the complement universe for NOT.
    pub universe: Vec<u32>,
    pub n_slots: usize,
}

impl InvertedIndex {
    pub fn build<'a, I>(slots: I) -> Self
    where
        I: IntoIterator<Item = Option<&'a [FeatureValue]>>,
        I::IntoIter: ExactSizeIterator,
    {
        let slots = slots.into_iter();
        let n_slots = slots.len();
        let mut postings: HashMap<FeatureValue, Vec<u32>> = HashMap::new();
        let mut universe = Vec::new();
        for (s, feats) in slots.enumerate() {
            let Some(feats) = feats else { continue };
            universe.push(s as u32);
            for fv in feats {
                let list = postings.entry(*fv).or_default();
                if list.last() != Some(&(s as u32)) {
                    list.push(s as u32);
                }
            }
        }
        Self { postings, universe, n_slots }
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

    /// Matching slots, ascending. Unknown terms have an empty posting.
    pub fn eval_list(&self, expr: &FilterExpr) -> Vec<u32> {
        match expr {
            FilterExpr::Leaf(fv) => self.postings.get(fv).cloned().unwrap_or_default(),
            FilterExpr::Not(c) => difference(&self.universe, &self.eval_list(c)),
            FilterExpr::And(cs) => {
                let mut lists: Vec<Vec<u32>> = cs.iter().map(|c| self.eval_list(c)).collect();
                lists.sort_by_key(Vec::len);
                let mut it = lists.into_iter();
                let first = it.next().unwrap_or_default();
                it.fold(first, |acc, l| intersect(&acc, &l))
            }
            FilterExpr::Or(cs) => union_k(cs.iter().map(|c| self.eval_list(c)).collect()),
        }
    }
}

pub fn inverted_eval(ii: &InvertedIndex, expr: &FilterExpr) -> BitMask {
    BitMask::from_slots(ii.n_slots, ii.eval_list(expr).into_iter().map(|s| s as usize))
}

fn intersect(a: &[u32], b: &[u32]) -> Vec<u32> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::with_capacity(a.len().min(b.len()));
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push(a[i]);
                i += 1;
                j += 1;
            }
        }
    }
    out
}

fn difference(a: &[u32], b: &[u32]) -> Vec<u32> {
    let mut j = 0;
    let mut out = Vec::with_capacity(a.len());
    for &x in a {
        while j < b.len() && b[j] < x {
            j += 1;
        }
        if j >= b.len() || b[j] != x {
            out.push(x);
        }
    }
    out
}

/// K-way merge of ascending lists into one ascending, duplicate-free list.
fn union_k(lists: Vec<Vec<u32>>) -> Vec<u32> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;
    let mut heap: BinaryHeap<Reverse<(u32, usize, usize)>> = lists
        .iter()
        .enumerate()
        .filter_map(|(li, l)| l.first().map(|&x| Reverse((x, li, 0))))
        .collect();
    let mut out: Vec<u32> = Vec::new();
    while let Some(Reverse((x, li, pos))) = heap.pop() {
        if out.last() != Some(&x) {
            out.push(x);
        }
        if let Some(&next) = lists[li].get(pos + 1) {
            heap.push(Reverse((next, li, pos + 1)));
        }
    }
    out
}
