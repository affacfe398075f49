//! Reference computations that share no code with the index scan paths.
//!
//! Everything here works on the catalog directly, in catalog order, with
//! plain loops and full sorts.

use std::cmp::Ordering;

use crate::catalog::{Catalog, FeatureValue};
use crate::filter::FilterExpr;
use crate::quantize::QuantParams;
use crate::topk::{Scored, TopkResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleScore {
    F32Dot,
    /// Int8 search score after quantizing with the given parameters.
    Int8Dot(QuantParams),
}

/// Int8 code of `x`, computed from the parameter definition.
pub fn oracle_quantize(x: f32, p: &QuantParams) -> i8 {
    let t = ((x as f64 - p.global_min as f64) * p.scale as f64).round_ties_even() - 128.0;
    t.clamp(-128.0, 127.0) as i8
}

fn f32_dot(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `sum_k item[k] * (query[k] - q0)` with `q0` the code of zero.
pub fn oracle_int8_score(query: &[i8], item: &[i8], p: &QuantParams) -> i32 {
    let q0 = oracle_quantize(0.0, p) as i64;
    let mut s = 0i64;
    for i in 0..query.len() {
        s += item[i] as i64 * (query[i] as i64 - q0);
    }
    s as i32
}

fn full_sort<S: Copy>(mut all: Vec<(u64, S)>, topk: usize, cmp: impl Fn(&S, &S) -> Ordering) -> TopkResult<S> {
    all.sort_by(|a, b| cmp(&b.1, &a.1).then(a.0.cmp(&b.0)));
    all.truncate(topk);
    TopkResult {
        entries: all.into_iter().map(|(item_id, score)| Scored { item_id, score }).collect(),
        k_requested: topk,
    }
}

/// Exact f32 top-k over catalog items admitted by `admit` (catalog index).
pub fn brute_force_f32(catalog: &Catalog, query: &[f32], topk: usize, admit: Option<&[bool]>) -> TopkResult<f32> {
    let all = catalog
        .items()
        .iter()
        .enumerate()
        .filter(|(i, _)| admit.is_none_or(|a| a[*i]))
        .map(|(_, it)| (it.item_id, f32_dot(query, &it.embedding)))
        .collect();
    full_sort(all, topk, |a: &f32, b: &f32| a.total_cmp(b))
}

/// Exact int8 top-k under the given quantization, scored with
/// [`oracle_int8_score`].
pub fn brute_force_int8(
    catalog: &Catalog,
    qp: &QuantParams,
    query: &[f32],
    topk: usize,
    admit: Option<&[bool]>,
) -> TopkResult<i32> {
    let q: Vec<i8> = query.iter().map(|&x| oracle_quantize(x, qp)).collect();
    let all = catalog
        .items()
        .iter()
        .enumerate()
        .filter(|(i, _)| admit.is_none_or(|a| a[*i]))
        .map(|(_, it)| {
            let v: Vec<i8> = it.embedding.iter().map(|&x| oracle_quantize(x, qp)).collect();
            (it.item_id, oracle_int8_score(&q, &v, qp))
        })
        .collect();
    full_sort(all, topk, |a: &i32, b: &i32| a.cmp(b))
}

/// Top-k ids with scores widened to f64, for either scoring mode.
pub fn brute_force_topk(
    catalog: &Catalog,
    query: &[f32],
    topk: usize,
    admit: Option<&[bool]>,
    score: OracleScore,
) -> TopkResult<f64> {
    match score {
        OracleScore::F32Dot => widen(brute_force_f32(catalog, query, topk, admit), |s| s as f64),
        OracleScore::Int8Dot(qp) => widen(brute_force_int8(catalog, &qp, query, topk, admit), |s| s as f64),
    }
}

fn widen<S>(r: TopkResult<S>, f: impl Fn(S) -> f64) -> TopkResult<f64> {
    TopkResult {
        entries: r.entries.into_iter().map(|s| Scored { item_id: s.item_id, score: f(s.score) }).collect(),
        k_requested: r.k_requested,
    }
}

/// Recursive filter interpreter over one item's feature list.
pub fn naive_filter(expr: &FilterExpr, features: &[FeatureValue]) -> bool {
    match expr {
        FilterExpr::Leaf(fv) => features.iter().any(|f| f == fv),
        FilterExpr::And(cs) => cs.iter().all(|c| naive_filter(c, features)),
        FilterExpr::Or(cs) => cs.iter().any(|c| naive_filter(c, features)),
        FilterExpr::Not(c) => !naive_filter(c, features),
    }
}

/// Exact filter result per catalog index.
pub fn naive_filter_mask(catalog: &Catalog, expr: &FilterExpr) -> Vec<bool> {
    catalog.items().iter().map(|it| naive_filter(expr, &it.features)).collect()
}
