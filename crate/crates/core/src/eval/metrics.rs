//! Recall and false-positive-rate measurement.

use std::collections::HashSet;

use serde::Serialize;

use crate::bitmask::BitMask;
use crate::catalog::FeatureValue;
use crate::filter::{bloom_eval_leaf, compile_filter, eval_compiled, forward_eval, hash_positions, BloomIndex, FilterExpr, ForwardIndex};

use super::EvalError;

/// `|result ∩ truth[..k]| / k`.
pub fn recall_at_k(result: &[u64], truth: &[u64], k: usize) -> Result<f64, EvalError> {
    if k == 0 || k > truth.len() {
        return Err(EvalError::InvalidConfig(format!(
            "recall@{k} needs 1 <= k <= {} ground-truth items",
            truth.len()
        )));
    }
    let t: HashSet<u64> = truth[..k].iter().copied().collect();
    let hit = result.iter().take(k).filter(|id| t.contains(id)).count();
    Ok(hit as f64 / k as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeafFpr {
    pub feature_id: u64,
    pub value: u64,
    pub false_positives: usize,
    /// Valid slots the exact filter rejects.
    pub negatives: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FprReport {
    pub per_query: Vec<LeafFpr>,
    pub false_positives: usize,
    pub negatives: usize,
    /// Pooled rate: total false positives over total negatives.
    pub rate: f64,
    /// Bloom admitted something the exact filter did not reject (must be 0).
    pub false_negatives: usize,
}

fn pooled(per_query: Vec<LeafFpr>, false_negatives: usize) -> FprReport {
    let false_positives = per_query.iter().map(|l| l.false_positives).sum();
    let negatives: usize = per_query.iter().map(|l| l.negatives).sum();
    FprReport {
        per_query,
        false_positives,
        negatives,
        rate: if negatives == 0 { 0.0 } else { false_positives as f64 / negatives as f64 },
        false_negatives,
    }
}

fn compare(bloom: &BitMask, exact: &BitMask, valid: &BitMask) -> (usize, usize, usize) {
    let (mut fp, mut neg, mut fneg) = (0, 0, 0);
    for ((b, e), v) in bloom.words().iter().zip(exact.words()).zip(valid.words()) {
        fp += (b & !e & v).count_ones() as usize;
        neg += (!e & v).count_ones() as usize;
        fneg += (!b & e & v).count_ones() as usize;
    }
    (fp, neg, fneg)
}

/// Per-leaf false positive rates of single-term filters. `forward` must
/// share the bloom index's slot order.
pub fn fpr_measure_leaves(bloom: &BloomIndex, forward: &ForwardIndex, leaves: &[FeatureValue]) -> FprReport {
    let valid = &forward.valid;
    let mut scratch = BitMask::zeros(bloom.n_slots());
    let mut fneg_total = 0;
    let per = leaves
        .iter()
        .map(|&fv| {
            bloom_eval_leaf(bloom, &hash_positions(fv, bloom.params()), &mut scratch);
            let exact = forward_eval(forward, &FilterExpr::Leaf(fv), None);
            let (fp, neg, fneg) = compare(&scratch, &exact, valid);
            fneg_total += fneg;
            LeafFpr {
                feature_id: fv.feature_id,
                value: fv.value,
                false_positives: fp,
                negatives: neg,
                rate: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
            }
        })
        .collect();
    pooled(per, fneg_total)
}

/// False positive rates of whole filter queries. NOT queries are rejected:
/// complementing a false positive yields a false negative.
pub fn fpr_measure_queries(bloom: &BloomIndex, forward: &ForwardIndex, queries: &[FilterExpr]) -> Result<FprReport, EvalError> {
    if queries.iter().any(|q| q.contains_not()) {
        return Err(EvalError::NotInWorkload);
    }
    let valid = &forward.valid;
    let mut fneg_total = 0;
    let per = queries
        .iter()
        .map(|q| {
            let cf = compile_filter(q, bloom.params());
            let b = eval_compiled(&cf, bloom, valid, None);
            let exact = forward_eval(forward, q, None);
            let (fp, neg, fneg) = compare(&b, &exact, valid);
            fneg_total += fneg;
            let leaf = q.leaves().first().copied().unwrap_or(FeatureValue::new(0, 0));
            LeafFpr {
                feature_id: leaf.feature_id,
                value: leaf.value,
                false_positives: fp,
                negatives: neg,
                rate: if neg == 0 { 0.0 } else { fp as f64 / neg as f64 },
            }
        })
        .collect();
    Ok(pooled(per, fneg_total))
}
