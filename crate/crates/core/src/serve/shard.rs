//! In-process sharding over disjoint item partitions.
//!
//! Each shard is a full engine over its partition. A request fans out the
//! filtered search to every shard, each returning its local top-k0 per task;
//! the concatenated candidates are merged across tasks and re-ranked once on
//! the coordinating thread, looking embeddings up in the owning shard.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::catalog::Catalog;
use crate::filter::FilterExpr;
use crate::quantize::compute_quant_params;
use crate::retrieval::{
    merge_candidates, rank_candidates, CandidateLookup, Engine, EngineConfig, RetrievalError, RetrievalRequest,
    RetrievalResponse, SearchScratch, SearchStats, StageStats, TaskQuery, ValueExpr,
};

use super::Backend;

type Result<T> = std::result::Result<T, RetrievalError>;

/// Assigns each item to one of `shards` partitions uniformly at random.
pub fn partition_catalog(catalog: &Catalog, shards: usize, seed: u64) -> Vec<Catalog> {
    assert!(shards >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let owner: Vec<usize> = (0..catalog.len()).map(|_| rng.gen_range(0..shards)).collect();
    (0..shards).map(|s| catalog.subset(|i| owner[i] == s)).collect()
}

pub struct ShardedEngine {
    shards: Vec<Engine>,
    owner: HashMap<u64, u32>,
    version: u64,
}

struct Gathered<'a> {
    se: &'a ShardedEngine,
}

impl CandidateLookup for Gathered<'_> {
    fn embedding(&self, item_id: u64) -> Result<&[f32]> {
        let s = self.se.owner.get(&item_id).ok_or(RetrievalError::MissingItem(item_id))?;
        self.se.shards[*s as usize].cache.lookup(item_id)
    }
}

impl ShardedEngine {
    /// Partitions `catalog` and builds one engine per shard. All shards share
    /// quantization parameters computed over the full catalog, so int8
    /// scores are comparable across shards.
    pub fn build(catalog: &Catalog, cfg: &EngineConfig, shards: usize, seed: u64) -> Result<Self> {
        let mut cfg = cfg.clone();
        if cfg.ivf.quant.is_none() {
            let qp = compute_quant_params(catalog.embeddings().as_slice()).map_err(crate::ivf::IvfError::from)?;
            cfg.ivf.quant = Some(qp);
        }
        if cfg.item_embeddings.is_some() {
            return Err(RetrievalError::InvalidRequest(
                "sharded build takes item embeddings from the catalog".into(),
            ));
        }
        let parts = partition_catalog(catalog, shards, seed);
        let engines = parts
            .iter()
            .map(|p| Engine::build(p, &cfg))
            .collect::<Result<Vec<_>>>()?;
        Self::new(engines, cfg.version)
    }

    pub fn new(shards: Vec<Engine>, version: u64) -> Result<Self> {
        let bad = |m: &str| Err(RetrievalError::Model(m.to_string()));
        let Some(first) = shards.first() else {
            return bad("need at least one shard");
        };
        for s in &shards[1..] {
            if s.dim() != first.dim() {
                return bad("shard dimensions differ");
            }
            if s.bloom.params() != first.bloom.params() {
                return bad("shard bloom parameters differ");
            }
            if s.ivf.quant_params() != first.ivf.quant_params() {
                return bad("shard quantization parameters differ");
            }
            if s.overarch != first.overarch || s.value_model != first.value_model {
                return bad("shard scorers differ");
            }
        }
        let mut owner = HashMap::new();
        for (i, s) in shards.iter().enumerate() {
            for &id in s.cache.ids() {
                if owner.insert(id, i as u32).is_some() {
                    return bad("shard partitions overlap");
                }
            }
        }
        Ok(Self { shards, owner, version })
    }

    pub fn shards(&self) -> &[Engine] {
        &self.shards
    }

    fn coordinator(&self) -> &Engine {
        &self.shards[0]
    }

    /// Per task, the concatenation of every shard's local top-k0 ids.
    pub fn gathered_candidates(&self, req: &RetrievalRequest, stats: &mut SearchStats) -> Result<Vec<Vec<u64>>> {
        let per_shard: Vec<Result<(Vec<Vec<u64>>, SearchStats)>> = self
            .shards
            .par_iter()
            .with_max_len(1)
            .map(|s| {
                let cf = req.filter.as_ref().map(|f| s.compile(f));
                let mut st = SearchStats::default();
                let r = s.candidates(req, cf.as_ref(), &mut SearchScratch::default(), &mut st)?;
                Ok((r.iter().map(|t| t.ids()).collect(), st))
            })
            .collect();
        let mut sets = vec![Vec::new(); req.tasks.len()];
        for r in per_shard {
            let (ids, st) = r?;
            stats.add(&st);
            for (set, local) in sets.iter_mut().zip(ids) {
                set.extend(local);
            }
        }
        Ok(sets)
    }
}

impl Backend for ShardedEngine {
    fn version(&self) -> u64 {
        self.version
    }

    fn dim(&self) -> usize {
        self.coordinator().dim()
    }

    fn parse_filter(&self, text: &str) -> Result<FilterExpr> {
        self.coordinator().parse_filter(text)
    }

    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse> {
        let start = Instant::now();
        let c = self.coordinator();
        c.validate_request(req)?;
        let bound = c.bind_value_model(&req.tasks, req.value_model.as_ref())?;
        let mut search = SearchStats::default();
        let sets = self.gathered_candidates(req, &mut search)?;
        let merged = merge_candidates(&sets, req.merge);
        let t = Instant::now();
        let items = rank_candidates(&c.overarch, &Gathered { se: self }, &req.tasks, &merged, &bound, req.topk)?;
        let mut stats = StageStats {
            overarch_us: t.elapsed().as_secs_f64() * 1e6,
            merged_candidates: merged.len(),
            ..Default::default()
        };
        stats.absorb_search(&search);
        stats.total_us = start.elapsed().as_secs_f64() * 1e6;
        Ok(RetrievalResponse {
            task_names: req.tasks.iter().map(|t| t.name.clone()).collect(),
            items,
            stats,
        })
    }

    fn esr(&self, tasks: &[TaskQuery], item_ids: &[u64], topk: usize, vm: Option<&ValueExpr>) -> Result<RetrievalResponse> {
        let start = Instant::now();
        let c = self.coordinator();
        c.validate_tasks(tasks)?;
        if topk == 0 {
            return Err(RetrievalError::InvalidRequest("topk must be at least 1".into()));
        }
        let bound = c.bind_value_model(tasks, vm)?;
        let mut ids = item_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let items = rank_candidates(&c.overarch, &Gathered { se: self }, tasks, &ids, &bound, topk)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e6;
        Ok(RetrievalResponse {
            task_names: tasks.iter().map(|t| t.name.clone()).collect(),
            items,
            stats: StageStats {
                overarch_us: elapsed,
                total_us: elapsed,
                merged_candidates: ids.len(),
                ..Default::default()
            },
        })
    }
}
