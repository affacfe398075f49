//! Latency/throughput harness.
//!
//! Runs `warmup_batches` untimed batches, then `timed_batches` timed ones,
//! each of `batch_size` requests cycled from the workload. Result hashes
//! cover the ranked ids and score bits of one pass over the workload, so
//! they are stable for a fixed engine, workload and config.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::bitmask::BitMask;
use crate::catalog::Catalog;
use crate::filter::{eval_compiled, CompiledFilter, EvalStats};
use crate::hash::fnv1a64_extend;
use crate::ivf::ScanStats;
use crate::retrieval::{
    codesigned_search, merge_candidates, rank_candidates, Engine, RankedItem, RetrievalError, RetrievalRequest,
    SearchScratch, SearchStats,
};
use crate::topk::TopkResult;

use super::metrics::{fpr_measure_queries, recall_at_k};
use super::oracle::{brute_force_f32, naive_filter_mask};
use super::workload::WorkloadQuery;
use super::EvalError;

/// The unfused path: evaluate the filter over every slot, then search the
/// probed clusters under that mask.
pub fn unfused_search(
    engine: &Engine,
    cf: Option<&CompiledFilter>,
    query: &[f32],
    nprobe: usize,
    k0: usize,
    stats: &mut SearchStats,
) -> Result<TopkResult<i32>, RetrievalError> {
    let ivf = &engine.ivf;
    let t = Instant::now();
    let probed = ivf.probe_centroids(query, nprobe)?;
    let q = ivf.quantize_query(query)?;
    stats.probe_us += t.elapsed().as_secs_f64() * 1e6;
    stats.probed_clusters += probed.len();
    let mask: Option<BitMask> = cf.map(|cf| {
        let t = Instant::now();
        let m = eval_compiled(cf, &engine.bloom, ivf.valid_mask(), None);
        stats.filter.add(&EvalStats {
            slots_evaluated: engine.bloom.n_words() * 64,
            plane_words_read: 0,
            peak_scratch_words: 0,
        });
        stats.filter_us += t.elapsed().as_secs_f64() * 1e6;
        m
    });
    let t = Instant::now();
    let mut scan = ScanStats::default();
    let r = ivf.search_clusters_with_stats(&q, &probed, mask.as_ref(), k0, &mut scan)?;
    stats.scan.scanned_slots += scan.scanned_slots;
    stats.scan.scored_slots += scan.scored_slots;
    stats.scan_us += t.elapsed().as_secs_f64() * 1e6;
    Ok(r)
}

/// The full pipeline with either search path.
pub fn retrieve_with(engine: &Engine, req: &RetrievalRequest, codesign: bool, stats: &mut SearchStats) -> Result<Vec<RankedItem>, RetrievalError> {
    engine.validate_request(req)?;
    let bound = engine.bind_value_model(&req.tasks, req.value_model.as_ref())?;
    let cf = req.filter.as_ref().map(|f| engine.compile(f));
    let mut scratch = SearchScratch::default();
    let mut sets = Vec::with_capacity(req.tasks.len());
    for t in &req.tasks {
        let r = if codesign {
            codesigned_search(&engine.ivf, &engine.bloom, cf.as_ref(), &t.user_embedding, req.nprobe, req.k0, &mut scratch, stats)?
        } else {
            unfused_search(engine, cf.as_ref(), &t.user_embedding, req.nprobe, req.k0, stats)?
        };
        sets.push(r.ids());
    }
    let merged = merge_candidates(&sets, req.merge);
    rank_candidates(&engine.overarch, &engine.cache, &req.tasks, &merged, &bound, req.topk)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub workload_id: String,
    pub nprobe: usize,
    pub k0: usize,
    pub topk: usize,
    pub batch_size: usize,
    pub warmup_batches: usize,
    pub timed_batches: usize,
    pub codesign: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            workload_id: "synth".into(),
            nprobe: 32,
            k0: 1000,
            topk: 100,
            batch_size: 6,
            warmup_batches: 50,
            timed_batches: 100,
            codesign: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub workload_id: String,
    pub nprobe: usize,
    pub topk: usize,
    pub m_bits: u32,
    pub k_hashes: u32,
    pub codesign: bool,
    pub queries: usize,
    pub batch_size: usize,
    pub timed_batches: usize,
    /// Per-batch latency.
    pub mean_us: f64,
    pub p50_us: f64,
    pub p99_us: f64,
    pub qps: f64,
    pub peak_bytes: u64,
    /// Mean per query over one workload pass.
    pub scanned_slots: f64,
    pub filter_slots_evaluated: f64,
    pub probe_us: f64,
    pub filter_us: f64,
    pub scan_us: f64,
    pub overarch_us: f64,
    /// Mean recall@topk of the first task's filtered IVF search against the
    /// exact filtered f32 ranking; present when a catalog is supplied.
    pub recall_at_k: Option<f64>,
    /// Pooled bloom FPR of the workload's NOT-free filters.
    pub fpr: Option<f64>,
    pub result_hash: String,
}

pub const CSV_HEADER: &str = "workload_id,nprobe,topk,M,K,recall_at_k,fpr,mean_us,p99_us,qps,peak_bytes,scanned_slots";

impl BenchReport {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let sci = |v: Option<f64>| v.map(|x| format!("{x:.4e}")).unwrap_or_default();
        let mut s = String::new();
        write!(
            s,
            "{},{},{},{},{},{},{},{:.3},{:.3},{:.3},{},{:.1}",
            self.workload_id,
            self.nprobe,
            self.topk,
            self.m_bits,
            self.k_hashes,
            opt(self.recall_at_k),
            sci(self.fpr),
            self.mean_us,
            self.p99_us,
            self.qps,
            self.peak_bytes,
            self.scanned_slots
        )
        .unwrap();
        s
    }
}

/// Peak resident set size of this process, when the platform reports it.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let i = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[i]
}

fn request(q: &WorkloadQuery, cfg: &BenchConfig) -> RetrievalRequest {
    RetrievalRequest {
        tasks: q.tasks.clone(),
        filter: q.filter.clone(),
        nprobe: cfg.nprobe,
        k0: cfg.k0,
        topk: cfg.topk,
        merge: Default::default(),
        value_model: None,
    }
}

pub fn bench(engine: &Engine, workload: &[WorkloadQuery], cfg: &BenchConfig, catalog: Option<&Catalog>) -> Result<BenchReport, EvalError> {
    if workload.is_empty() {
        return Err(EvalError::EmptyWorkload);
    }
    if cfg.batch_size == 0 || cfg.timed_batches == 0 {
        return Err(EvalError::InvalidConfig("batch size and timed batches must be positive".into()));
    }
    let reqs: Vec<RetrievalRequest> = workload.iter().map(|q| request(q, cfg)).collect();

    // One untimed pass for counters, hashes and quality metrics.
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    let mut stats = SearchStats::default();
    let mut overarch_us = 0.0;
    let mut recall_sum = 0.0;
    let mut results = Vec::with_capacity(reqs.len());
    for r in &reqs {
        let before = stats.probe_us + stats.filter_us + stats.scan_us;
        let t = Instant::now();
        let items = retrieve_with(engine, r, cfg.codesign, &mut stats)?;
        overarch_us += t.elapsed().as_secs_f64() * 1e6 - (stats.probe_us + stats.filter_us + stats.scan_us - before);
        for it in &items {
            hash = fnv1a64_extend(hash, &it.item_id.to_le_bytes());
            hash = fnv1a64_extend(hash, &it.score.to_bits().to_le_bytes());
        }
        results.push(items);
    }
    let recall_at_k = match catalog {
        Some(c) => {
            let mut scratch = SearchScratch::default();
            let mut st = SearchStats::default();
            for q in workload {
                let mask = q.filter.as_ref().map(|f| naive_filter_mask(c, f));
                let truth = brute_force_f32(c, &q.tasks[0].user_embedding, cfg.topk, mask.as_deref()).ids();
                let cf = q.filter.as_ref().map(|f| engine.compile(f));
                let ids = codesigned_search(
                    &engine.ivf,
                    &engine.bloom,
                    cf.as_ref(),
                    &q.tasks[0].user_embedding,
                    cfg.nprobe,
                    cfg.topk,
                    &mut scratch,
                    &mut st,
                )
                .map_err(EvalError::from)?
                .ids();
                recall_sum += if truth.is_empty() { 1.0 } else { recall_at_k(&ids, &truth, truth.len())? };
            }
            Some(recall_sum / workload.len() as f64)
        }
        None => None,
    };
    let fpr = match catalog {
        Some(c) => {
            let filters: Vec<_> = workload.iter().filter_map(|q| q.filter.clone()).filter(|f| !f.contains_not()).collect();
            if filters.is_empty() {
                None
            } else {
                let fi = crate::filter::ForwardIndex::for_ivf(c, &engine.ivf);
                Some(fpr_measure_queries(&engine.bloom, &fi, &filters)?.rate)
            }
        }
        None => None,
    };

    let run_batch = |b: usize| -> Result<(), RetrievalError> {
        let batch: Vec<&RetrievalRequest> = (0..cfg.batch_size).map(|i| &reqs[(b * cfg.batch_size + i) % reqs.len()]).collect();
        batch
            .par_iter()
            .with_max_len(1)
            .map(|r| retrieve_with(engine, r, cfg.codesign, &mut SearchStats::default()).map(|_| ()))
            .collect()
    };
    for b in 0..cfg.warmup_batches {
        run_batch(b)?;
    }
    let mut lat = Vec::with_capacity(cfg.timed_batches);
    let start = Instant::now();
    for b in 0..cfg.timed_batches {
        let t = Instant::now();
        run_batch(cfg.warmup_batches + b)?;
        lat.push(t.elapsed().as_secs_f64() * 1e6);
    }
    let total = start.elapsed().as_secs_f64();
    lat.sort_by(f64::total_cmp);
    let n = reqs.len() as f64;
    let p = engine.bloom.params();
    Ok(BenchReport {
        workload_id: cfg.workload_id.clone(),
        nprobe: cfg.nprobe,
        topk: cfg.topk,
        m_bits: p.m_bits,
        k_hashes: p.k_hashes,
        codesign: cfg.codesign,
        queries: reqs.len(),
        batch_size: cfg.batch_size,
        timed_batches: cfg.timed_batches,
        mean_us: lat.iter().sum::<f64>() / lat.len() as f64,
        p50_us: percentile(&lat, 0.50),
        p99_us: percentile(&lat, 0.99),
        qps: (cfg.timed_batches * cfg.batch_size) as f64 / total,
        peak_bytes: peak_rss_bytes().unwrap_or(0),
        scanned_slots: stats.scan.scanned_slots as f64 / n,
        filter_slots_evaluated: stats.filter.slots_evaluated as f64 / n,
        probe_us: stats.probe_us / n,
        filter_us: stats.filter_us / n,
        scan_us: stats.scan_us / n,
        overarch_us: overarch_us / n,
        recall_at_k,
        fpr,
        result_hash: format!("{hash:016x}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{synth_catalog, SynthConfig};
    use crate::eval::workload::{synth_workload, WorkloadConfig};
    use crate::retrieval::EngineConfig;

    #[test]
    fn empty_workload_and_determinism() {
        let c = synth_catalog(&SynthConfig::new(600, 8, 5, 1)).unwrap();
        let e = Engine::build(&c, &EngineConfig::new(8)).unwrap();
        let cfg = BenchConfig {
            nprobe: 4,
            k0: 50,
            topk: 10,
            warmup_batches: 1,
            timed_batches: 2,
            ..Default::default()
        };
        assert!(matches!(bench(&e, &[], &cfg, None), Err(EvalError::EmptyWorkload)));
        let mut wc = WorkloadConfig::new(8, 2);
        wc.filter_prob = 0.5;
        let w = synth_workload(&c, &wc);
        let a = bench(&e, &w, &cfg, Some(&c)).unwrap();
        let b = bench(&e, &w, &cfg, Some(&c)).unwrap();
        assert_eq!(a.result_hash, b.result_hash);
        assert_eq!(a.scanned_slots, b.scanned_slots);
        assert_eq!(a.csv_row().split(',').count(), CSV_HEADER.split(',').count());
        let off = bench(&e, &w, &BenchConfig { codesign: false, ..cfg }, None).unwrap();
        assert_eq!(off.result_hash, a.result_hash);
    }
}
