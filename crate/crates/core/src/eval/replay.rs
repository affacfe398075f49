//! Stage-by-stage reference replay of the retrieval pipeline.
//!
//! Each stage is recomputed from its definition: bloom membership from
//! per-item signatures, probing from centroid dot products, int8 scoring
//! from the quantization formula, merging with sets, scorer forward passes
//! with explicit index loops, and value models with a direct interpreter.
//! Only the trained index structure (centroids and cluster membership) and
//! the scorer weights are taken from the engine.

use std::collections::{BTreeSet, HashMap};

use crate::catalog::{Catalog, FeatureValue};
use crate::filter::{BloomParams, FilterExpr, HashScheme};
use crate::hash::{fnv1a64, splitmix64_mix};
use crate::ivf::PAD;
use crate::retrieval::{Dense, Engine, MergePolicy, OverArchModel, RankedItem, RetrievalRequest, ValueExpr};

use super::oracle::{oracle_int8_score, oracle_quantize};
use super::EvalError;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayStages {
    /// Per task: (item id, int8 score), best first.
    pub per_task: Vec<Vec<(u64, i32)>>,
    /// Merged candidate ids, ascending.
    pub merged: Vec<u64>,
    /// Every merged candidate with its task and final scores, in `merged` order.
    pub scored: Vec<RankedItem>,
    pub final_items: Vec<RankedItem>,
}

fn bit_positions(fv: FeatureValue, p: &BloomParams) -> Vec<u32> {
    let mut key = [0u8; 16];
    key[..8].copy_from_slice(&fv.feature_id.to_le_bytes());
    key[8..].copy_from_slice(&fv.value.to_le_bytes());
    let h1 = fnv1a64(&key);
    let h2 = splitmix64_mix(h1) | 1;
    (0..p.k_hashes as u64)
        .map(|i| {
            let mut h = h1.wrapping_add(i.wrapping_mul(h2));
            if p.scheme == HashScheme::Fnv1aSplitMixRemix {
                h = splitmix64_mix(h);
            }
            (h % p.m_bits as u64) as u32
        })
        .collect()
}

fn bloom_admits(expr: &FilterExpr, signature: &[bool], p: &BloomParams) -> bool {
    match expr {
        FilterExpr::Leaf(fv) => bit_positions(*fv, p).iter().all(|&b| signature[b as usize]),
        FilterExpr::And(cs) => cs.iter().all(|c| bloom_admits(c, signature, p)),
        FilterExpr::Or(cs) => cs.iter().any(|c| bloom_admits(c, signature, p)),
        FilterExpr::Not(c) => !bloom_admits(c, signature, p),
    }
}

fn dense(l: &Dense, x: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; l.out_dim];
    for (o, out) in y.iter_mut().enumerate() {
        let mut s = 0.0;
        for i in 0..l.in_dim {
            s += l.weights[o * l.in_dim + i] as f64 * x[i];
        }
        *out = s + l.bias[o] as f64;
    }
    y
}

/// Independent scorer forward pass.
pub fn reference_score(model: &OverArchModel, task: &str, user: &[f32], item: &[f32]) -> Option<f64> {
    match model {
        OverArchModel::Mlp(m) => {
            let head = m.heads.get(task)?;
            let mut x: Vec<f64> = Vec::with_capacity(3 * m.dim);
            x.extend(user.iter().map(|&v| v as f64));
            x.extend(item.iter().map(|&v| v as f64));
            if m.include_product {
                for k in 0..m.dim {
                    x.push(user[k] as f64 * item[k] as f64);
                }
            }
            for l in &m.hidden {
                x = dense(l, &x).into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect();
            }
            Some(dense(head, &x)[0])
        }
        OverArchModel::Mol(m) => {
            let u: Vec<f64> = user.iter().map(|&v| v as f64).collect();
            let it: Vec<f64> = item.iter().map(|&v| v as f64).collect();
            let ui: Vec<f64> = u.iter().chain(&it).copied().collect();
            let logits = dense(&m.gate, &ui);
            let mx = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let w: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = w.iter().sum();
            let mut s = 0.0;
            for p in 0..m.user_proj.len() {
                let a = dense(&m.user_proj[p], &u);
                let b = dense(&m.item_proj[p], &it);
                let d: f64 = (0..a.len()).map(|k| a[k] * b[k]).sum();
                s += w[p] / z * d;
            }
            Some(s)
        }
    }
}

/// Direct value-model interpreter over named scores.
pub fn reference_value(e: &ValueExpr, scores: &HashMap<&str, f64>) -> Result<f64, EvalError> {
    let r = |x: &ValueExpr| reference_value(x, scores);
    let all = |args: &[ValueExpr]| args.iter().map(r).collect::<Result<Vec<f64>, _>>();
    Ok(match e {
        ValueExpr::Const { value } => *value,
        ValueExpr::Task { task } => *scores
            .get(task.as_str())
            .ok_or_else(|| EvalError::Replay(format!("unknown task {task}")))?,
        ValueExpr::Add { args } => all(args)?.into_iter().sum(),
        ValueExpr::Mul { args } => all(args)?.into_iter().product(),
        ValueExpr::Min { args } => all(args)?.into_iter().fold(f64::INFINITY, f64::min),
        ValueExpr::Max { args } => all(args)?.into_iter().fold(f64::NEG_INFINITY, f64::max),
        ValueExpr::Sub { args } => r(&args[0])? - r(&args[1])?,
        ValueExpr::Div { args } => {
            let d = r(&args[1])?;
            if d == 0.0 {
                return Err(EvalError::Replay("division by zero".into()));
            }
            r(&args[0])? / d
        }
        ValueExpr::Clamp { arg, lo, hi } => r(arg)?.max(*lo).min(*hi),
        ValueExpr::If { cond, then, otherwise } => {
            let (a, b) = (r(&cond.left)?, r(&cond.right)?);
            if cond.cmp.apply(a, b) {
                r(then)?
            } else {
                r(otherwise)?
            }
        }
    })
}

/// Replays `req` against `engine` (built from `catalog` with catalog
/// embeddings cached) one stage at a time.
pub fn reference_retrieve(catalog: &Catalog, engine: &Engine, req: &RetrievalRequest) -> Result<ReplayStages, EvalError> {
    let items = catalog.items();
    let params = *engine.bloom.params();

    // Filter: per-item signatures, then the expression tree.
    let admit: Vec<bool> = match &req.filter {
        None => vec![true; items.len()],
        Some(f) => items
            .iter()
            .map(|it| {
                let mut sig = vec![false; params.m_bits as usize];
                for fv in &it.features {
                    for b in bit_positions(*fv, &params) {
                        sig[b as usize] = true;
                    }
                }
                bloom_admits(f, &sig, &params)
            })
            .collect(),
    };

    // Cluster membership as catalog indices.
    let ivf = &engine.ivf;
    let members: Vec<Vec<usize>> = ivf
        .clusters()
        .iter()
        .map(|c| c.slots().filter(|&s| ivf.perm()[s] != PAD).map(|s| ivf.perm()[s] as usize).collect())
        .collect();
    let qp = *ivf.quant_params();
    let item_q: Vec<Vec<i8>> = items
        .iter()
        .map(|it| it.embedding.iter().map(|&x| oracle_quantize(x, &qp)).collect())
        .collect();

    let mut per_task = Vec::new();
    for t in &req.tasks {
        let mut cs: Vec<(f32, usize)> = ivf
            .centroids()
            .vectors
            .iter_rows()
            .enumerate()
            .map(|(c, row)| {
                let mut s = 0.0f32;
                for k in 0..row.len() {
                    s += t.user_embedding[k] * row[k];
                }
                (s, c)
            })
            .collect();
        cs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let q: Vec<i8> = t.user_embedding.iter().map(|&x| oracle_quantize(x, &qp)).collect();
        let mut scored: Vec<(u64, i32)> = Vec::new();
        for &(_, c) in cs.iter().take(req.nprobe) {
            for &i in &members[c] {
                if admit[i] {
                    let s = oracle_int8_score(&q, &item_q[i], &qp);
                    scored.push((items[i].item_id, s));
                }
            }
        }
        scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(req.k0);
        per_task.push(scored);
    }

    let merged: Vec<u64> = match req.merge {
        MergePolicy::Union => per_task.iter().flatten().map(|p| p.0).collect::<BTreeSet<_>>().into_iter().collect(),
        MergePolicy::Intersection => {
            let sets: Vec<BTreeSet<u64>> = per_task.iter().map(|p| p.iter().map(|x| x.0).collect()).collect();
            sets[0].iter().filter(|id| sets.iter().all(|s| s.contains(id))).copied().collect()
        }
    };

    let by_id: HashMap<u64, usize> = items.iter().enumerate().map(|(i, it)| (it.item_id, i)).collect();
    let names: Vec<&str> = req.tasks.iter().map(|t| t.name.as_str()).collect();
    let default_vm = ValueExpr::sum_of(&names);
    let vm = req.value_model.as_ref().or(engine.value_model.as_ref()).unwrap_or(&default_vm);
    let mut scored = Vec::with_capacity(merged.len());
    for &id in &merged {
        let emb = &items[by_id[&id]].embedding;
        let mut task_scores = Vec::new();
        let mut named = HashMap::new();
        for t in &req.tasks {
            let s = reference_score(&engine.overarch, &t.name, &t.user_embedding, emb)
                .ok_or_else(|| EvalError::Replay(format!("scorer has no head {}", t.name)))?;
            task_scores.push(s);
            named.insert(t.name.as_str(), s);
        }
        let score = reference_value(vm, &named)?;
        scored.push(RankedItem { item_id: id, score, task_scores });
    }
    let mut final_items = scored.clone();
    final_items.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    final_items.truncate(req.topk);
    Ok(ReplayStages {
        per_task,
        merged,
        scored,
        final_items,
    })
}
