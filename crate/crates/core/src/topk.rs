//! Bounded top-k selection with a deterministic tie-break.
//!
//! Higher score ranks first; equal scores rank by ascending item id.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

/// Score types usable in a [`TopkResult`]. Floats use IEEE total order.
pub trait Score: Copy + std::fmt::Debug + PartialEq {
    fn cmp_score(&self, other: &Self) -> Ordering;
}

impl Score for i32 {
    fn cmp_score(&self, other: &Self) -> Ordering {
        self.cmp(other)
    }
}

impl Score for f32 {
    fn cmp_score(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

impl Score for f64 {
    fn cmp_score(&self, other: &Self) -> Ordering {
        self.total_cmp(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored<S> {
    pub item_id: u64,
    pub score: S,
}

impl<S: Score> Scored<S> {
    /// `Less` means `self` ranks ahead of `other`.
    #[inline]
    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .cmp_score(&self.score)
            .then(self.item_id.cmp(&other.item_id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopkResult<S> {
    pub entries: Vec<Scored<S>>,
    pub k_requested: usize,
}

impl<S: Score> TopkResult<S> {
    pub fn empty(k: usize) -> Self {
        Self {
            entries: Vec::new(),
            k_requested: k,
        }
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.iter().map(|e| e.item_id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

// Heap order puts the worst-ranked entry at the top.
struct HeapEntry<S>(Scored<S>);

impl<S: Score> PartialEq for HeapEntry<S> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<S: Score> Eq for HeapEntry<S> {}
impl<S: Score> PartialOrd for HeapEntry<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<S: Score> Ord for HeapEntry<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.rank_cmp(&other.0)
    }
}

/// Streaming collector keeping the best `k` entries seen so far.
pub struct TopkCollector<S> {
    k: usize,
    heap: BinaryHeap<HeapEntry<S>>,
}

impl<S: Score> TopkCollector<S> {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k.min(1 << 16) + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, item_id: u64, score: S) {
        if self.k == 0 {
            return;
        }
        let cand = Scored { item_id, score };
        if self.heap.len() < self.k {
            self.heap.push(HeapEntry(cand));
        } else if let Some(worst) = self.heap.peek() {
            if cand.rank_cmp(&worst.0) == Ordering::Less {
                self.heap.pop();
                self.heap.push(HeapEntry(cand));
            }
        }
    }

    /// Worst retained score once the collector is full; anything not beating
    /// it can be skipped.
    #[inline]
    pub fn threshold(&self) -> Option<Scored<S>> {
        if self.heap.len() == self.k {
            self.heap.peek().map(|e| e.0)
        } else {
            None
        }
    }

    pub fn into_result(self) -> TopkResult<S> {
        let mut entries: Vec<Scored<S>> = self.heap.into_iter().map(|e| e.0).collect();
        entries.sort_by(|a, b| a.rank_cmp(b));
        TopkResult {
            entries,
            k_requested: self.k,
        }
    }
}

/// Selects the top `k` from an arbitrary list (used for merges across shards).
pub fn select_topk<S: Score>(items: impl IntoIterator<Item = Scored<S>>, k: usize) -> TopkResult<S> {
    let mut c = TopkCollector::new(k);
    for s in items {
        c.push(s.item_id, s.score);
    }
    c.into_result()
}
