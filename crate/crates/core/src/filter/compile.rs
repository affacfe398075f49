//! Postfix compilation of filter expressions and the bit-mask stack machine.
//!
//! Compilation walks the expression tree post-order into an operation array
//! and precomputes one [`QueryBloom`] per distinct leaf. Evaluation runs the
//! array left to right over a slot range: `PushLeaf` pushes the leaf's plane
//! AND, `And`/`Or` combine the top two masks word by word, `Not` complements
//! the top mask within the valid slots. The final mask is ANDed with the
//! validity mask.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::bitmask::{words_for, BitMask, WORD_BITS};
use crate::catalog::FeatureValue;

use super::bloom::{hash_positions, BloomIndex, BloomParams, QueryBloom};
use super::expr::FilterExpr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterOp {
    PushLeaf(u32),
    And,
    Or,
    Not,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledLeaf {
    pub term: FeatureValue,
    pub bloom: QueryBloom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompiledFilter {
    pub ops: Vec<FilterOp>,
    pub leaves: Vec<CompiledLeaf>,
}

impl CompiledFilter {
    /// Simulates the stack; `None` if an op underflows or the program does
    /// not end with exactly one entry.
    pub fn max_stack_depth(&self) -> Option<usize> {
        let mut depth = 0usize;
        let mut peak = 0usize;
        for op in &self.ops {
            match op {
                FilterOp::PushLeaf(i) => {
                    if *i as usize >= self.leaves.len() {
                        return None;
                    }
                    depth += 1;
                }
                FilterOp::And | FilterOp::Or => {
                    if depth < 2 {
                        return None;
                    }
                    depth -= 1;
                }
                FilterOp::Not => {
                    if depth < 1 {
                        return None;
                    }
                }
            }
            peak = peak.max(depth);
        }
        (depth == 1).then_some(peak)
    }

    pub fn is_stack_balanced(&self) -> bool {
        self.max_stack_depth().is_some()
    }
}

pub fn compile_filter(expr: &FilterExpr, params: &BloomParams) -> CompiledFilter {
    let mut ops = Vec::new();
    let mut leaves = Vec::new();
    let mut index: HashMap<FeatureValue, u32> = HashMap::new();
    emit(expr, params, &mut ops, &mut leaves, &mut index);
    CompiledFilter { ops, leaves }
}

fn emit(
    e: &FilterExpr,
    params: &BloomParams,
    ops: &mut Vec<FilterOp>,
    leaves: &mut Vec<CompiledLeaf>,
    index: &mut HashMap<FeatureValue, u32>,
) {
    match e {
        FilterExpr::Leaf(fv) => {
            let i = *index.entry(*fv).or_insert_with(|| {
                leaves.push(CompiledLeaf {
                    term: *fv,
                    bloom: hash_positions(*fv, params),
                });
                (leaves.len() - 1) as u32
            });
            ops.push(FilterOp::PushLeaf(i));
        }
        FilterExpr::Not(c) => {
            emit(c, params, ops, leaves, index);
            ops.push(FilterOp::Not);
        }
        FilterExpr::And(cs) | FilterExpr::Or(cs) => {
            let op = if matches!(e, FilterExpr::And(_)) { FilterOp::And } else { FilterOp::Or };
            for (i, c) in cs.iter().enumerate() {
                emit(c, params, ops, leaves, index);
                if i > 0 {
                    ops.push(op);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalStats {
    /// Slots covered by evaluated ranges (word-granular).
    pub slots_evaluated: usize,
    pub plane_words_read: usize,
    /// Largest total of live stack words during evaluation.
    pub peak_scratch_words: usize,
}

impl EvalStats {
    pub fn add(&mut self, other: &EvalStats) {
        self.slots_evaluated += other.slots_evaluated;
        self.plane_words_read += other.plane_words_read;
        self.peak_scratch_words = self.peak_scratch_words.max(other.peak_scratch_words);
    }
}

/// Reusable stack buffers; one per stack level.
#[derive(Debug, Default)]
pub struct EvalScratch {
    stack: Vec<Vec<u64>>,
}

/// Evaluates `cf` over each word range and writes the result words into
/// `out`. Words outside the ranges are left untouched.
pub fn eval_compiled_into(
    cf: &CompiledFilter,
    index: &BloomIndex,
    valid: &BitMask,
    word_ranges: &[Range<usize>],
    out: &mut BitMask,
    scratch: &mut EvalScratch,
    stats: &mut EvalStats,
) {
    assert_eq!(out.len(), index.n_slots());
    for words in word_ranges {
        let dst = &mut out.words_mut()[words.clone()];
        eval_words(cf, index, valid, words.clone(), dst, scratch, stats);
    }
}

/// Evaluates `cf` over one word range into `out` (`out.len() == words.len()`).
pub fn eval_words(
    cf: &CompiledFilter,
    index: &BloomIndex,
    valid: &BitMask,
    words: Range<usize>,
    out: &mut [u64],
    scratch: &mut EvalScratch,
    stats: &mut EvalStats,
) {
    assert_eq!(valid.len(), index.n_slots(), "validity mask must cover the bloom slots");
    assert_eq!(out.len(), words.len());
    let n = words.len();
    if n == 0 {
        return;
    }
    let depth = cf.max_stack_depth().expect("compiled filter must be stack balanced");
    if scratch.stack.len() < depth {
        scratch.stack.resize_with(depth, Vec::new);
    }
    stats.slots_evaluated += n * WORD_BITS;
    stats.peak_scratch_words = stats.peak_scratch_words.max(n * depth);
    let valid_w = &valid.words()[words.clone()];
    let mut top = 0usize;
    for op in &cf.ops {
        match *op {
            FilterOp::PushLeaf(i) => {
                let buf = &mut scratch.stack[top];
                buf.resize(n, 0);
                stats.plane_words_read += index.eval_leaf_words(&cf.leaves[i as usize].bloom, words.clone(), buf);
                top += 1;
            }
            FilterOp::And | FilterOp::Or => {
                let (lo, hi) = scratch.stack.split_at_mut(top - 1);
                let (a, b) = (&mut lo[top - 2], &hi[0]);
                if *op == FilterOp::And {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x &= y);
                } else {
                    a.iter_mut().zip(b).for_each(|(x, y)| *x |= y);
                }
                top -= 1;
            }
            FilterOp::Not => {
                let a = &mut scratch.stack[top - 1];
                a.iter_mut().zip(valid_w).for_each(|(x, v)| *x = !*x & v);
            }
        }
    }
    debug_assert_eq!(top, 1);
    for ((d, r), v) in out.iter_mut().zip(&scratch.stack[0]).zip(valid_w) {
        *d = r & v;
    }
}

/// Full-range evaluation, or restricted to `range` (a slot range). Slots
/// outside `range` are zero in the result.
pub fn eval_compiled(cf: &CompiledFilter, index: &BloomIndex, valid: &BitMask, range: Option<Range<usize>>) -> BitMask {
    let range = range.unwrap_or(0..index.n_slots());
    assert!(range.end <= index.n_slots());
    let mut out = BitMask::zeros(index.n_slots());
    if range.is_empty() {
        return out;
    }
    let words = range.start / WORD_BITS..words_for(range.end);
    eval_compiled_into(
        cf,
        index,
        valid,
        &[words],
        &mut out,
        &mut EvalScratch::default(),
        &mut EvalStats::default(),
    );
    if !range.start.is_multiple_of(WORD_BITS) || !range.end.is_multiple_of(WORD_BITS) {
        out.restrict_to(range);
    }
    out
}
