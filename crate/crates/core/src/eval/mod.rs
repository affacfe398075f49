//! Oracles, metrics, workloads and the benchmark harness.
//!
//! Oracles live in [`oracle`] and [`replay`] and work from the catalog with
//! their own loops; they never call into the IVF scan or bloom plane code.

pub mod bench;
pub mod metrics;
pub mod oracle;
pub mod replay;
pub mod workload;

use serde::Serialize;
use thiserror::Error;

use crate::catalog::Catalog;
use crate::filter::FilterError;
use crate::ivf::{IvfError, IvfIndex};
use crate::retrieval::RetrievalError;

pub use bench::{bench, peak_rss_bytes, retrieve_with, unfused_search, BenchConfig, BenchReport, CSV_HEADER};
pub use metrics::{fpr_measure_leaves, fpr_measure_queries, recall_at_k, FprReport, LeafFpr};
pub use oracle::{brute_force_f32, brute_force_int8, brute_force_topk, naive_filter, naive_filter_mask, oracle_int8_score, oracle_quantize, OracleScore};
pub use replay::{reference_retrieve, reference_score, reference_value, ReplayStages};
pub use workload::{catalog_terms, query_near_item, random_filter, synth_workload, FilterGen, WorkloadConfig, WorkloadQuery};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("workload is empty")]
    EmptyWorkload,
    #[error("FPR workloads must be NOT-free")]
    NotInWorkload,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("replay failed: {0}")]
    Replay(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Ivf(#[from] IvfError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecallPoint {
    pub nprobe: usize,
    pub mean_recall: f64,
    pub mean_scanned_slots: f64,
}

/// Mean recall@k of unfiltered IVF search against f32 brute force, for each
/// `nprobe`.
pub fn recall_sweep(
    catalog: &Catalog,
    ivf: &IvfIndex,
    queries: &[Vec<f32>],
    nprobes: &[usize],
    k: usize,
) -> Result<Vec<RecallPoint>, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyWorkload);
    }
    let truths: Vec<Vec<u64>> = queries.iter().map(|q| brute_force_f32(catalog, q, k, None).ids()).collect();
    nprobes
        .iter()
        .map(|&np| {
            let mut sum = 0.0;
            let mut scanned = 0usize;
            for (q, truth) in queries.iter().zip(&truths) {
                let mut st = crate::ivf::ScanStats::default();
                let r = ivf.search_with_stats(q, np, k, None, &mut st)?;
                scanned += st.scanned_slots;
                sum += recall_at_k(&r.ids(), truth, k)?;
            }
            Ok(RecallPoint {
                nprobe: np,
                mean_recall: sum / queries.len() as f64,
                mean_scanned_slots: scanned as f64 / queries.len() as f64,
            })
        })
        .collect()
}
