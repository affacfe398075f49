//! Engine state and the request pipeline.
//!
//! Per task: probe centroids, evaluate the compiled filter over the probed
//! clusters' words only, scan those clusters under the resulting mask. The
//! per-task candidate sets are merged, re-scored by the OverArch model on
//! cached f32 item embeddings, combined by the value model, and cut to
//! `topk` by final score (ties by ascending item id).

use std::cmp::Ordering;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, FeatureDictionary};
use crate::filter::{compile_filter, eval_words, parse_filter, BloomIndex, BloomParams, CompiledFilter, EvalScratch, EvalStats, FilterExpr};
use crate::ivf::{IvfConfig, IvfIndex, ScanStats, TILE_ROWS};
use crate::linalg::Matrix;
use crate::topk::{TopkCollector, TopkResult};

use super::cache::EmbeddingCache;
use super::overarch::OverArchModel;
use super::value_model::{BoundValueModel, ValueExpr};
use super::RetrievalError;

type Result<T> = std::result::Result<T, RetrievalError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskQuery {
    pub name: String,
    pub user_embedding: Vec<f32>,
}

impl TaskQuery {
    pub fn new(name: &str, user_embedding: Vec<f32>) -> Self {
        Self {
            name: name.to_string(),
            user_embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergePolicy {
    #[default]
    Union,
    Intersection,
}

impl std::str::FromStr for MergePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "union" => Ok(Self::Union),
            "intersection" => Ok(Self::Intersection),
            _ => Err(format!("unknown merge policy {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRequest {
    pub tasks: Vec<TaskQuery>,
    pub filter: Option<FilterExpr>,
    pub nprobe: usize,
    /// Candidates kept per task before re-ranking.
    pub k0: usize,
    pub topk: usize,
    pub merge: MergePolicy,
    /// Overrides the engine's default value model.
    pub value_model: Option<ValueExpr>,
}

impl RetrievalRequest {
    pub fn single(task: TaskQuery, nprobe: usize, k0: usize, topk: usize) -> Self {
        Self {
            tasks: vec![task],
            filter: None,
            nprobe,
            k0,
            topk,
            merge: MergePolicy::Union,
            value_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: u64,
    pub score: f64,
    /// Aligned with the request's task order.
    pub task_scores: Vec<f64>,
}

fn rank_order(a: &RankedItem, b: &RankedItem) -> Ordering {
    b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id))
}

/// Work counters and stage timings of one codesigned search.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    pub probe_us: f64,
    pub filter_us: f64,
    pub scan_us: f64,
    pub probed_clusters: usize,
    pub filter: EvalStats,
    pub scan: ScanStats,
}

impl SearchStats {
    pub fn add(&mut self, o: &SearchStats) {
        self.probe_us += o.probe_us;
        self.filter_us += o.filter_us;
        self.scan_us += o.scan_us;
        self.probed_clusters += o.probed_clusters;
        self.filter.add(&o.filter);
        self.scan.scanned_slots += o.scan.scanned_slots;
        self.scan.scored_slots += o.scan.scored_slots;
        self.scan.tiles += o.scan.tiles;
        self.scan.max_tile_rows = self.scan.max_tile_rows.max(o.scan.max_tile_rows);
        self.scan.gathered_bytes += o.scan.gathered_bytes;
    }
}

/// Per-caller buffers reused across searches.
#[derive(Debug, Default)]
pub struct SearchScratch {
    eval: EvalScratch,
    mask: Vec<u64>,
    tile: Vec<(u32, i32)>,
}

fn micros(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e6
}

/// Filtered IVF search where the filter is evaluated only over the slots of
/// the probed clusters. Returns exactly what full-range filter evaluation
/// followed by a masked search would.
#[allow(clippy::too_many_arguments)]
pub fn codesigned_search(
    ivf: &IvfIndex,
    bloom: &BloomIndex,
    cf: Option<&CompiledFilter>,
    query: &[f32],
    nprobe: usize,
    k0: usize,
    scratch: &mut SearchScratch,
    stats: &mut SearchStats,
) -> Result<TopkResult<i32>> {
    if bloom.n_slots() != ivf.n_slots() {
        return Err(RetrievalError::InvalidRequest(format!(
            "bloom index covers {} slots, ivf has {}",
            bloom.n_slots(),
            ivf.n_slots()
        )));
    }
    let t = Instant::now();
    let q = ivf.quantize_query(query)?;
    let probed = ivf.probe_centroids(query, nprobe)?;
    stats.probe_us += micros(t);
    stats.probed_clusters += probed.len();

    let mut collector = TopkCollector::new(k0);
    if scratch.tile.capacity() < TILE_ROWS {
        scratch.tile.reserve(TILE_ROWS);
    }
    for &c in &probed {
        let range = ivf.clusters()[c as usize];
        if range.len == 0 {
            continue;
        }
        let mask = match cf {
            Some(cf) => {
                let t = Instant::now();
                let words = range.words();
                scratch.mask.resize(words.len(), 0);
                eval_words(cf, bloom, ivf.valid_mask(), words, &mut scratch.mask, &mut scratch.eval, &mut stats.filter);
                stats.filter_us += micros(t);
                Some(&scratch.mask[..])
            }
            None => None,
        };
        let t = Instant::now();
        ivf.scan_cluster(&q, c, mask, &mut collector, &mut scratch.tile, &mut stats.scan);
        stats.scan_us += micros(t);
    }
    Ok(collector.into_result())
}

/// Embedding source for the re-ranking stage.
pub trait CandidateLookup: Sync {
    fn embedding(&self, item_id: u64) -> Result<&[f32]>;
}

impl CandidateLookup for EmbeddingCache {
    fn embedding(&self, item_id: u64) -> Result<&[f32]> {
        self.lookup(item_id)
    }
}

/// Scores every candidate for every task, applies the value model and keeps
/// the best `topk`.
pub fn rank_candidates<L: CandidateLookup + ?Sized>(
    model: &OverArchModel,
    lookup: &L,
    tasks: &[TaskQuery],
    candidates: &[u64],
    value_model: &BoundValueModel,
    topk: usize,
) -> Result<Vec<RankedItem>> {
    let scored: Vec<Result<RankedItem>> = candidates
        .par_iter()
        .with_min_len(64)
        .map(|&id| {
            let emb = lookup.embedding(id)?;
            let task_scores = tasks
                .iter()
                .map(|t| model.score(&t.name, &t.user_embedding, emb))
                .collect::<Result<Vec<f64>>>()?;
            let score = value_model.eval(&task_scores)?;
            Ok(RankedItem { item_id: id, score, task_scores })
        })
        .collect();
    let mut items = scored.into_iter().collect::<Result<Vec<_>>>()?;
    if topk < items.len() {
        items.select_nth_unstable_by(topk, rank_order);
        items.truncate(topk);
    }
    items.sort_by(rank_order);
    Ok(items)
}

/// Ranks `item_ids` for one task using cached embeddings.
pub fn esr_rank(
    cache: &EmbeddingCache,
    scorer: &OverArchModel,
    task: &TaskQuery,
    item_ids: &[u64],
    topk: usize,
) -> Result<Vec<RankedItem>> {
    let mut ids = item_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let vm = ValueExpr::task(&task.name).bind(std::slice::from_ref(&task.name))?;
    rank_candidates(scorer, cache, std::slice::from_ref(task), &ids, &vm, topk)
}

/// Sorted merged candidate ids.
pub fn merge_candidates(sets: &[Vec<u64>], policy: MergePolicy) -> Vec<u64> {
    let mut all: Vec<u64> = sets.iter().flatten().copied().collect();
    all.sort_unstable();
    match policy {
        MergePolicy::Union => {
            all.dedup();
            all
        }
        MergePolicy::Intersection => {
            let need = sets.len();
            let mut out = Vec::new();
            let mut i = 0;
            while i < all.len() {
                let j = i + all[i..].iter().take_while(|&&x| x == all[i]).count();
                if j - i == need {
                    out.push(all[i]);
                }
                i = j;
            }
            out
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub probe_us: f64,
    pub filter_us: f64,
    pub scan_us: f64,
    pub overarch_us: f64,
    pub total_us: f64,
    pub filter_slots_evaluated: usize,
    pub scanned_slots: usize,
    pub merged_candidates: usize,
}

impl StageStats {
    pub fn absorb_search(&mut self, s: &SearchStats) {
        self.probe_us += s.probe_us;
        self.filter_us += s.filter_us;
        self.scan_us += s.scan_us;
        self.filter_slots_evaluated += s.filter.slots_evaluated;
        self.scanned_slots += s.scan.scanned_slots;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResponse {
    pub task_names: Vec<String>,
    pub items: Vec<RankedItem>,
    pub stats: StageStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub ivf: IvfConfig,
    pub bloom: BloomParams,
    pub overarch: OverArchModel,
    pub value_model: Option<ValueExpr>,
    /// Item-tower output per catalog item (catalog order); defaults to the
    /// catalog embeddings.
    pub item_embeddings: Option<Matrix>,
    pub version: u64,
}

impl EngineConfig {
    /// Dot-product scorer, default clustering and bloom parameters.
    pub fn new(dim: usize) -> Self {
        Self {
            ivf: IvfConfig::default(),
            bloom: BloomParams::default(),
            overarch: OverArchModel::dot_product(dim),
            value_model: None,
            item_embeddings: None,
            version: 1,
        }
    }
}

/// Everything needed to serve requests. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Engine {
    pub version: u64,
    pub ivf: IvfIndex,
    pub bloom: BloomIndex,
    pub cache: EmbeddingCache,
    pub overarch: OverArchModel,
    pub value_model: Option<ValueExpr>,
    pub dictionary: FeatureDictionary,
}

impl Engine {
    pub fn build(catalog: &Catalog, cfg: &EngineConfig) -> Result<Self> {
        let ivf = IvfIndex::build(catalog, &cfg.ivf)?;
        let bloom = BloomIndex::for_ivf(catalog, &ivf, cfg.bloom);
        let cache = match &cfg.item_embeddings {
            Some(m) => EmbeddingCache::new(catalog.items().iter().map(|it| it.item_id).collect(), m.clone())?,
            None => EmbeddingCache::from_catalog(catalog),
        };
        Self::from_parts(
            cfg.version,
            ivf,
            bloom,
            cache,
            cfg.overarch.clone(),
            cfg.value_model.clone(),
            catalog.dictionary().clone(),
        )
    }

    pub fn from_parts(
        version: u64,
        ivf: IvfIndex,
        bloom: BloomIndex,
        cache: EmbeddingCache,
        overarch: OverArchModel,
        value_model: Option<ValueExpr>,
        dictionary: FeatureDictionary,
    ) -> Result<Self> {
        let bad = |m: String| Err(RetrievalError::Model(m));
        if bloom.n_slots() != ivf.n_slots() {
            return bad(format!("bloom covers {} slots, ivf has {}", bloom.n_slots(), ivf.n_slots()));
        }
        overarch.validate()?;
        if overarch.dim() != ivf.dim() || cache.dim() != ivf.dim() {
            return bad(format!(
                "dimensions disagree: index {}, scorer {}, cache {}",
                ivf.dim(),
                overarch.dim(),
                cache.dim()
            ));
        }
        for (slot, &id) in ivf.item_ids().iter().enumerate() {
            if ivf.valid_mask().get(slot) && cache.get(id).is_none() {
                return Err(RetrievalError::MissingItem(id));
            }
        }
        if let Some(vm) = &value_model {
            vm.check_shape()?;
        }
        Ok(Self {
            version,
            ivf,
            bloom,
            cache,
            overarch,
            value_model,
            dictionary,
        })
    }

    pub fn dim(&self) -> usize {
        self.ivf.dim()
    }

    pub fn parse_filter(&self, text: &str) -> Result<FilterExpr> {
        Ok(parse_filter(text, &self.dictionary)?)
    }

    pub fn compile(&self, expr: &FilterExpr) -> CompiledFilter {
        compile_filter(expr, self.bloom.params())
    }

    /// Request value model, else the engine default, else the sum of all
    /// task scores; bound to the request's task order.
    pub fn bind_value_model(&self, tasks: &[TaskQuery], vm: Option<&ValueExpr>) -> Result<BoundValueModel> {
        let names: Vec<String> = tasks.iter().map(|t| t.name.clone()).collect();
        match vm.or(self.value_model.as_ref()) {
            Some(vm) => vm.bind(&names),
            None => {
                let refs: Vec<&str> = names.iter().map(|s| s.as_str()).collect();
                ValueExpr::sum_of(&refs).bind(&names)
            }
        }
    }

    pub fn validate_tasks(&self, tasks: &[TaskQuery]) -> Result<()> {
        if tasks.is_empty() {
            return Err(RetrievalError::InvalidRequest("at least one task is required".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|o| o.name == t.name) {
                return Err(RetrievalError::InvalidRequest(format!("duplicate task {:?}", t.name)));
            }
            if t.user_embedding.len() != self.dim() {
                return Err(RetrievalError::InvalidRequest(format!(
                    "task {:?} embedding has length {}, expected {}",
                    t.name,
                    t.user_embedding.len(),
                    self.dim()
                )));
            }
            if t.user_embedding.iter().any(|v| !v.is_finite()) {
                return Err(RetrievalError::InvalidRequest(format!("task {:?} embedding is not finite", t.name)));
            }
            if !self.overarch.supports_task(&t.name) {
                return Err(RetrievalError::UnknownTask(t.name.clone()));
            }
        }
        Ok(())
    }

    pub fn validate_request(&self, req: &RetrievalRequest) -> Result<()> {
        self.validate_tasks(&req.tasks)?;
        if req.nprobe == 0 {
            return Err(RetrievalError::InvalidRequest("nprobe must be at least 1".into()));
        }
        if req.topk == 0 || req.topk > req.k0 {
            return Err(RetrievalError::InvalidRequest(format!(
                "need 1 <= topk <= k0, got topk {} and k0 {}",
                req.topk, req.k0
            )));
        }
        Ok(())
    }

    /// Per-task candidate ids (top-k0 of the filtered int8 search).
    pub fn candidates(
        &self,
        req: &RetrievalRequest,
        cf: Option<&CompiledFilter>,
        scratch: &mut SearchScratch,
        stats: &mut SearchStats,
    ) -> Result<Vec<TopkResult<i32>>> {
        req.tasks
            .iter()
            .map(|t| codesigned_search(&self.ivf, &self.bloom, cf, &t.user_embedding, req.nprobe, req.k0, scratch, stats))
            .collect()
    }

    pub fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse> {
        retrieve(self, req)
    }

    /// Ranks an explicit id list with every task and the value model.
    pub fn esr(&self, tasks: &[TaskQuery], item_ids: &[u64], topk: usize, vm: Option<&ValueExpr>) -> Result<RetrievalResponse> {
        let start = Instant::now();
        self.validate_tasks(tasks)?;
        if topk == 0 {
            return Err(RetrievalError::InvalidRequest("topk must be at least 1".into()));
        }
        let bound = self.bind_value_model(tasks, vm)?;
        let mut ids = item_ids.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let t = Instant::now();
        let items = rank_candidates(&self.overarch, &self.cache, tasks, &ids, &bound, topk)?;
        let stats = StageStats {
            overarch_us: micros(t),
            total_us: micros(start),
            merged_candidates: ids.len(),
            ..Default::default()
        };
        Ok(RetrievalResponse {
            task_names: tasks.iter().map(|t| t.name.clone()).collect(),
            items,
            stats,
        })
    }
}

pub fn retrieve(engine: &Engine, req: &RetrievalRequest) -> Result<RetrievalResponse> {
    let start = Instant::now();
    engine.validate_request(req)?;
    let bound = engine.bind_value_model(&req.tasks, req.value_model.as_ref())?;
    let cf = req.filter.as_ref().map(|f| engine.compile(f));
    let mut search = SearchStats::default();
    let per_task = engine.candidates(req, cf.as_ref(), &mut SearchScratch::default(), &mut search)?;
    let sets: Vec<Vec<u64>> = per_task.iter().map(|r| r.ids()).collect();
    let merged = merge_candidates(&sets, req.merge);
    let t = Instant::now();
    let items = rank_candidates(&engine.overarch, &engine.cache, &req.tasks, &merged, &bound, req.topk)?;
    let mut stats = StageStats {
        overarch_us: micros(t),
        merged_candidates: merged.len(),
        ..Default::default()
    };
    stats.absorb_search(&search);
    stats.total_us = micros(start);
    Ok(RetrievalResponse {
        task_names: req.tasks.iter().map(|t| t.name.clone()).collect(),
        items,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{synth_catalog, SynthConfig};
    use crate::filter::eval_compiled;

    fn engine(n: usize, seed: u64) -> (Catalog, Engine) {
        let c = synth_catalog(&SynthConfig::new(n, 16, 8, seed)).unwrap();
        let mut cfg = EngineConfig::new(16);
        cfg.ivf.seed = seed;
        let e = Engine::build(&c, &cfg).unwrap();
        (c, e)
    }

    #[test]
    fn codesign_matches_full_mask() {
        let (c, e) = engine(2000, 3);
        let expr = e.parse_filter("f1 = 1 OR f2 = 2 AND NOT f3 = 5").unwrap();
        let cf = e.compile(&expr);
        let full = eval_compiled(&cf, &e.bloom, e.ivf.valid_mask(), None);
        let q = c.items()[17].embedding.clone();
        for nprobe in [1, 3, 10, 45] {
            let mut st = SearchStats::default();
            let got = codesigned_search(&e.ivf, &e.bloom, Some(&cf), &q, nprobe, 50, &mut SearchScratch::default(), &mut st).unwrap();
            let want = e.ivf.search(&q, nprobe, 50, Some(&full)).unwrap();
            assert_eq!(got, want);
            let probed = e.ivf.probe_centroids(&q, nprobe).unwrap();
            let sizes: usize = probed.iter().map(|&p| e.ivf.clusters()[p as usize].len).sum();
            assert_eq!(st.scan.scanned_slots, sizes);
        }
    }

    #[test]
    fn single_task_dot_product_equals_ivf() {
        let (c, e) = engine(1500, 4);
        let q = c.items()[3].embedding.clone();
        let req = RetrievalRequest::single(TaskQuery::new("main", q.clone()), 4, 100, 100);
        let resp = retrieve(&e, &req).unwrap();
        let ivf = e.ivf.search(&q, 4, 100, None).unwrap();
        let mut got = resp.items.iter().map(|r| r.item_id).collect::<Vec<_>>();
        let mut want = ivf.ids();
        got.sort_unstable();
        want.sort_unstable();
        assert_eq!(got, want);
        // f64 re-scores must be ordered consistently.
        assert!(resp.items.windows(2).all(|w| rank_order(&w[0], &w[1]) == Ordering::Less));
    }

    #[test]
    fn merge_algebra() {
        let sets = vec![vec![5, 1, 3], vec![3, 4, 5], vec![5, 3, 9]];
        assert_eq!(merge_candidates(&sets, MergePolicy::Union), vec![1, 3, 4, 5, 9]);
        assert_eq!(merge_candidates(&sets, MergePolicy::Intersection), vec![3, 5]);
        assert!(merge_candidates(&[vec![1], vec![2]], MergePolicy::Intersection).is_empty());
    }

    #[test]
    fn request_validation() {
        let (_, e) = engine(300, 5);
        let mut req = RetrievalRequest::single(TaskQuery::new("a", vec![0.1; 16]), 2, 10, 20);
        assert!(matches!(retrieve(&e, &req), Err(RetrievalError::InvalidRequest(_))));
        req.topk = 5;
        req.tasks.push(TaskQuery::new("a", vec![0.1; 16]));
        assert!(matches!(retrieve(&e, &req), Err(RetrievalError::InvalidRequest(_))));
        req.tasks[1] = TaskQuery::new("b", vec![0.1; 3]);
        assert!(matches!(retrieve(&e, &req), Err(RetrievalError::InvalidRequest(_))));
        req.tasks.pop();
        req.value_model = Some(ValueExpr::task("zzz"));
        assert_eq!(retrieve(&e, &req).unwrap_err(), RetrievalError::UnknownTask("zzz".into()));
    }

    #[test]
    fn esr_full_sort_and_missing() {
        let (c, e) = engine(300, 6);
        let t = TaskQuery::new("x", c.items()[0].embedding.clone());
        let ids: Vec<u64> = (0..40).collect();
        let r = esr_rank(&e.cache, &e.overarch, &t, &ids, 100).unwrap();
        assert_eq!(r.len(), 40);
        assert!(r.windows(2).all(|w| w[0].score >= w[1].score));
        assert_eq!(r[0].item_id, 0);
        assert_eq!(
            esr_rank(&e.cache, &e.overarch, &t, &[1, 999_999], 5).unwrap_err(),
            RetrievalError::MissingItem(999_999)
        );
    }
}
