//! Inverted-file index over int8 item embeddings in a cluster-major slot layout.
//!
//! Items are grouped by cluster into contiguous *slot* ranges. Every range
//! starts on a 64-slot boundary and is padded to a multiple of 64, so a
//! cluster covers whole words of any per-slot bit mask (validity, bloom
//! planes). Padding slots hold zero embeddings and a cleared validity bit.
//!
//! Search quantizes the query with the index's global parameters, probes the
//! `nprobe` best centroids by f32 dot product, then streams the int8 rows of
//! those clusters straight from the index in place, scoring at most
//! [`TILE_ROWS`] rows per tile. No gathered copy of candidate embeddings is
//! ever built.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitmask::{BitMask, WORD_BITS};
use crate::catalog::Catalog;
use crate::kmeans::{kmeans_train, Centroids, KMeansConfig};
use crate::linalg::dot;
use crate::quantize::{centered_dot, compute_quant_params, quantize_vector, QuantError, QuantParams, QuantizedMatrix};
use crate::topk::{TopkCollector, TopkResult};

pub const SLOT_ALIGN: usize = 64;
pub const TILE_ROWS: usize = 4096;
/// `perm` entry of a padding slot.
pub const PAD: u32 = u32::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum IvfError {
    #[error("k = {k} exceeds the number of rows ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("inconsistent index layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub type Result<T> = std::result::Result<T, IvfError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterRange {
    pub start: usize,
    /// Exclusive, padded end.
    pub end: usize,
    /// Real (non-padding) items in the range.
    pub len: usize,
}

impl ClusterRange {
    pub fn slots(&self) -> Range<usize> {
        self.start..self.end
    }

    pub fn words(&self) -> Range<usize> {
        self.start / WORD_BITS..self.end / WORD_BITS
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IvfConfig {
    /// Defaults to `ceil(sqrt(n))`.
    pub n_clusters: Option<usize>,
    /// Defaults to min/max over the catalog embeddings.
    pub quant: Option<QuantParams>,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for IvfConfig {
    fn default() -> Self {
        Self {
            n_clusters: None,
            quant: None,
            max_iters: 25,
            tol: 1e-4,
            seed: 0,
        }
    }
}

pub fn default_n_clusters(n_items: usize) -> usize {
    ((n_items as f64).sqrt().ceil() as usize).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    centroids: Centroids,
    perm: Vec<u32>,
    inv_perm: Vec<u32>,
    clusters: Vec<ClusterRange>,
    items_q: QuantizedMatrix,
    valid: BitMask,
    item_ids: Vec<u64>,
}

/// Counters filled by a scan; the allocation-accounting hook for the fused
/// scan contract.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanStats {
    /// Real items inside the listed clusters.
    pub scanned_slots: usize,
    /// Items that passed the mask and were scored.
    pub scored_slots: usize,
    pub tiles: usize,
    /// Largest number of rows scored in one tile (bounded by [`TILE_ROWS`]).
    pub max_tile_rows: usize,
    /// Bytes of candidate embeddings copied out of the index. Always zero.
    pub gathered_bytes: usize,
}

impl IvfIndex {
    /// Trains the clustering and lays items out cluster-major.
    pub fn build(catalog: &Catalog, cfg: &IvfConfig) -> Result<Self> {
        let data = catalog.embeddings();
        let k = cfg.n_clusters.unwrap_or_else(|| default_n_clusters(catalog.len()));
        let km = kmeans_train(
            &data,
            &KMeansConfig {
                k,
                max_iters: cfg.max_iters,
                tol: cfg.tol,
                seed: cfg.seed,
            },
        )?;
        let qp = match cfg.quant {
            Some(qp) => qp,
            None => compute_quant_params(data.as_slice())?,
        };
        let ids: Vec<u64> = catalog.items().iter().map(|it| it.item_id).collect();
        Self::from_assignment(km.centroids, &km.assignment, &ids, &data, qp)
    }

    /// Lays out items given a cluster assignment. Within a cluster, items are
    /// ordered by ascending item id.
    pub fn from_assignment(
        centroids: Centroids,
        assignment: &[u32],
        item_ids: &[u64],
        embeddings: &crate::linalg::Matrix,
        qp: QuantParams,
    ) -> Result<Self> {
        let k = centroids.n_clusters();
        let dim = centroids.dim();
        if embeddings.cols() != dim {
            return Err(IvfError::DimMismatch { expected: dim, got: embeddings.cols() });
        }
        let n = item_ids.len();
        if assignment.len() != n || embeddings.rows() != n {
            return Err(IvfError::Layout("assignment/items length mismatch".into()));
        }
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); k];
        for (i, &c) in assignment.iter().enumerate() {
            let c = c as usize;
            if c >= k {
                return Err(IvfError::Layout(format!("cluster {c} out of range")));
            }
            members[c].push(i as u32);
        }
        let mut clusters = Vec::with_capacity(k);
        let mut start = 0usize;
        for m in members.iter_mut() {
            m.sort_by_key(|&i| item_ids[i as usize]);
            let end = start + m.len().div_ceil(SLOT_ALIGN) * SLOT_ALIGN;
            clusters.push(ClusterRange { start, end, len: m.len() });
            start = end;
        }
        let n_slots = start;
        let mut perm = vec![PAD; n_slots];
        let mut inv_perm = vec![0u32; n];
        let mut slot_ids = vec![0u64; n_slots];
        let mut valid = BitMask::zeros(n_slots);
        let mut q = vec![0i8; n_slots * dim];
        for (c, m) in members.iter().enumerate() {
            for (j, &i) in m.iter().enumerate() {
                let slot = clusters[c].start + j;
                perm[slot] = i;
                inv_perm[i as usize] = slot as u32;
                slot_ids[slot] = item_ids[i as usize];
                valid.set(slot, true);
                q[slot * dim..(slot + 1) * dim]
                    .copy_from_slice(&quantize_vector(embeddings.row(i as usize), &qp));
            }
        }
        Ok(Self {
            centroids,
            perm,
            inv_perm,
            clusters,
            items_q: QuantizedMatrix::from_raw(q, n_slots, dim, qp),
            valid,
            item_ids: slot_ids,
        })
    }

    /// Reassembles an index from stored parts, checking every layout invariant.
    pub fn from_parts(
        centroids: Centroids,
        perm: Vec<u32>,
        clusters: Vec<ClusterRange>,
        items_q: QuantizedMatrix,
        valid: BitMask,
        item_ids: Vec<u64>,
    ) -> Result<Self> {
        let n_slots = perm.len();
        let bad = |m: &str| Err(IvfError::Layout(m.to_string()));
        if items_q.rows() != n_slots || valid.len() != n_slots || item_ids.len() != n_slots {
            return bad("slot-indexed arrays disagree in length");
        }
        if items_q.dim() != centroids.dim() {
            return Err(IvfError::DimMismatch { expected: centroids.dim(), got: items_q.dim() });
        }
        if clusters.len() != centroids.n_clusters() {
            return bad("cluster range count differs from centroid count");
        }
        let mut expect_start = 0;
        for c in &clusters {
            if c.start != expect_start || c.start % SLOT_ALIGN != 0 || c.end % SLOT_ALIGN != 0 || c.end < c.start {
                return bad("cluster ranges are not contiguous and 64-aligned");
            }
            if c.len > c.end - c.start || c.end - c.start - c.len >= SLOT_ALIGN {
                return bad("cluster padding exceeds 63 slots");
            }
            for s in c.slots() {
                let real = s < c.start + c.len;
                if valid.get(s) != real || (perm[s] == PAD) == real {
                    return bad("validity mask disagrees with cluster lengths");
                }
            }
            expect_start = c.end;
        }
        if expect_start != n_slots {
            return bad("cluster ranges do not cover the slot space");
        }
        let n_items = valid.count_ones();
        let mut inv_perm = vec![u32::MAX; n_items];
        for (s, &p) in perm.iter().enumerate() {
            if p != PAD {
                let p = p as usize;
                if p >= n_items || inv_perm[p] != u32::MAX {
                    return bad("perm is not a bijection onto item indices");
                }
                inv_perm[p] = s as u32;
            }
        }
        Ok(Self { centroids, perm, inv_perm, clusters, items_q, valid, item_ids })
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_slots(&self) -> usize {
        self.perm.len()
    }

    pub fn n_items(&self) -> usize {
        self.inv_perm.len()
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn clusters(&self) -> &[ClusterRange] {
        &self.clusters
    }

    /// Slot → original item index (`PAD` for padding).
    pub fn perm(&self) -> &[u32] {
        &self.perm
    }

    /// Original item index → slot.
    pub fn inv_perm(&self) -> &[u32] {
        &self.inv_perm
    }

    pub fn items_q(&self) -> &QuantizedMatrix {
        &self.items_q
    }

    pub fn quant_params(&self) -> &QuantParams {
        self.items_q.params()
    }

    pub fn valid_mask(&self) -> &BitMask {
        &self.valid
    }

    /// Slot → item id (0 for padding).
    pub fn item_ids(&self) -> &[u64] {
        &self.item_ids
    }

    pub fn quantize_query(&self, query: &[f32]) -> Result<Vec<i8>> {
        self.check_dim(query.len())?;
        Ok(quantize_vector(query, self.quant_params()))
    }

    fn check_dim(&self, got: usize) -> Result<()> {
        if got != self.dim() {
            return Err(IvfError::DimMismatch { expected: self.dim(), got });
        }
        Ok(())
    }

    /// The `nprobe` clusters with the highest f32 centroid dot product,
    /// best first, ties by ascending cluster id.
    pub fn probe_centroids(&self, query: &[f32], nprobe: usize) -> Result<Vec<u32>> {
        self.check_dim(query.len())?;
        if nprobe == 0 {
            return Err(IvfError::InvalidParam("nprobe must be at least 1".into()));
        }
        let mut scored: Vec<(f32, u32)> = self
            .centroids
            .vectors
            .iter_rows()
            .enumerate()
            .map(|(c, row)| (dot(query, row), c as u32))
            .collect();
        let cmp = |a: &(f32, u32), b: &(f32, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        let nprobe = nprobe.min(scored.len());
        if nprobe < scored.len() {
            scored.select_nth_unstable_by(nprobe - 1, cmp);
            scored.truncate(nprobe);
        }
        scored.sort_by(cmp);
        Ok(scored.into_iter().map(|(_, c)| c).collect())
    }

    pub fn search_clusters(
        &self,
        query_q: &[i8],
        clusters: &[u32],
        mask: Option<&BitMask>,
        topk: usize,
    ) -> Result<TopkResult<i32>> {
        self.search_clusters_with_stats(query_q, clusters, mask, topk, &mut ScanStats::default())
    }

    /// Exact int8 top-k over the valid, mask-admitted slots of `clusters`.
    pub fn search_clusters_with_stats(
        &self,
        query_q: &[i8],
        clusters: &[u32],
        mask: Option<&BitMask>,
        topk: usize,
        stats: &mut ScanStats,
    ) -> Result<TopkResult<i32>> {
        self.check_dim(query_q.len())?;
        if let Some(m) = mask {
            if m.len() != self.n_slots() {
                return Err(IvfError::InvalidParam(format!(
                    "mask covers {} slots, index has {}",
                    m.len(),
                    self.n_slots()
                )));
            }
        }
        let mut seen = vec![false; self.n_clusters()];
        let mut collector = TopkCollector::new(topk);
        let mut tile_scores = Vec::with_capacity(TILE_ROWS);
        for &c in clusters {
            let range = *self
                .clusters
                .get(c as usize)
                .ok_or_else(|| IvfError::InvalidParam(format!("cluster {c} out of range")))?;
            if std::mem::replace(&mut seen[c as usize], true) {
                continue;
            }
            let local = mask.map(|m| &m.words()[range.words()]);
            self.scan_cluster(query_q, c, local, &mut collector, &mut tile_scores, stats);
        }
        Ok(collector.into_result())
    }

    /// Scores one cluster into `collector`. `mask_words`, when given, covers
    /// exactly the cluster's words. `tile_scores` is caller-owned scratch.
    pub fn scan_cluster(
        &self,
        query_q: &[i8],
        cluster: u32,
        mask_words: Option<&[u64]>,
        collector: &mut TopkCollector<i32>,
        tile_scores: &mut Vec<(u32, i32)>,
        stats: &mut ScanStats,
    ) {
        let range = self.clusters[cluster as usize];
        debug_assert!(mask_words.is_none_or(|m| m.len() == range.words().len()));
        let valid = self.valid.words();
        let first_word = range.start / WORD_BITS;
        let q0 = self.items_q.params().zero_code();
        stats.scanned_slots += range.len;
        let mut tile_start = range.start;
        while tile_start < range.end {
            let tile_end = (tile_start + TILE_ROWS).min(range.end);
            tile_scores.clear();
            for w in tile_start / WORD_BITS..tile_end / WORD_BITS {
                let mut bits = valid[w];
                if let Some(m) = mask_words {
                    bits &= m[w - first_word];
                }
                while bits != 0 {
                    let slot = w * WORD_BITS + bits.trailing_zeros() as usize;
                    bits &= bits - 1;
                    let score = centered_dot(query_q, q0, self.items_q.row(slot), self.items_q.row_sum(slot));
                    tile_scores.push((slot as u32, score));
                }
            }
            stats.tiles += 1;
            stats.max_tile_rows = stats.max_tile_rows.max(tile_scores.len());
            stats.scored_slots += tile_scores.len();
            for &(slot, score) in tile_scores.iter() {
                collector.push(self.item_ids[slot as usize], score);
            }
            tile_start = tile_end;
        }
    }

    pub fn search(&self, query: &[f32], nprobe: usize, topk: usize, mask: Option<&BitMask>) -> Result<TopkResult<i32>> {
        self.search_with_stats(query, nprobe, topk, mask, &mut ScanStats::default())
    }

    pub fn search_with_stats(
        &self,
        query: &[f32],
        nprobe: usize,
        topk: usize,
        mask: Option<&BitMask>,
        stats: &mut ScanStats,
    ) -> Result<TopkResult<i32>> {
        let q = self.quantize_query(query)?;
        let probed = self.probe_centroids(query, nprobe)?;
        self.search_clusters_with_stats(&q, &probed, mask, topk, stats)
    }
}
