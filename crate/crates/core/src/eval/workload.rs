//! Synthetic query workloads: user embeddings near catalog items and random
//! boolean filters over catalog terms.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::catalog::{Catalog, FeatureValue};
use crate::filter::FilterExpr;
use crate::linalg::l2_normalize;
use crate::retrieval::TaskQuery;

/// Every distinct term present in the catalog, sorted.
pub fn catalog_terms(catalog: &Catalog) -> Vec<FeatureValue> {
    let mut t: Vec<FeatureValue> = catalog.items().iter().flat_map(|it| it.features.iter().copied()).collect();
    t.sort_unstable();
    t.dedup();
    t
}

/// A catalog item's embedding plus Gaussian noise of per-coordinate scale
/// `noise / sqrt(dim)`, normalized.
pub fn query_near_item(catalog: &Catalog, rng: &mut impl Rng, noise: f32) -> Vec<f32> {
    let it = &catalog.items()[rng.gen_range(0..catalog.len())];
    let s = noise / (catalog.dim() as f32).sqrt();
    let mut q: Vec<f32> = it
        .embedding
        .iter()
        .map(|x| x + s * rng.sample::<f32, _>(StandardNormal))
        .collect();
    l2_normalize(&mut q);
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterGen {
    pub max_depth: usize,
    pub max_children: usize,
    pub allow_not: bool,
    /// Probability a leaf names a value absent from the catalog.
    pub absent_prob: f64,
}

impl Default for FilterGen {
    fn default() -> Self {
        Self {
            max_depth: 3,
            max_children: 3,
            allow_not: true,
            absent_prob: 0.1,
        }
    }
}

pub fn random_filter(rng: &mut impl Rng, terms: &[FeatureValue], g: &FilterGen) -> FilterExpr {
    gen(rng, terms, g, g.max_depth)
}

fn gen(rng: &mut impl Rng, terms: &[FeatureValue], g: &FilterGen, depth: usize) -> FilterExpr {
    let node = if depth == 0 || rng.gen_bool(0.35) {
        let t = *terms.choose(rng).expect("need at least one term");
        if rng.gen_bool(g.absent_prob) {
            FilterExpr::leaf(t.feature_id, t.value + 1_000_000 + rng.gen_range(0..1000))
        } else {
            FilterExpr::Leaf(t)
        }
    } else {
        let n = rng.gen_range(2..=g.max_children.max(2));
        let cs = (0..n).map(|_| gen(rng, terms, g, depth - 1)).collect();
        if rng.gen_bool(0.5) {
            FilterExpr::And(cs)
        } else {
            FilterExpr::Or(cs)
        }
    };
    if g.allow_not && rng.gen_bool(0.2) {
        FilterExpr::not(node)
    } else {
        node
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadQuery {
    pub tasks: Vec<TaskQuery>,
    pub filter: Option<FilterExpr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadConfig {
    pub n_queries: usize,
    pub tasks: Vec<String>,
    pub noise: f32,
    /// Fraction of queries carrying a filter.
    pub filter_prob: f64,
    pub filters: FilterGen,
    pub seed: u64,
}

impl WorkloadConfig {
    pub fn new(n_queries: usize, seed: u64) -> Self {
        Self {
            n_queries,
            tasks: vec!["main".to_string()],
            noise: 0.3,
            filter_prob: 0.0,
            filters: FilterGen::default(),
            seed,
        }
    }
}

pub fn synth_workload(catalog: &Catalog, cfg: &WorkloadConfig) -> Vec<WorkloadQuery> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let terms = catalog_terms(catalog);
    (0..cfg.n_queries)
        .map(|_| {
            let tasks = cfg
                .tasks
                .iter()
                .map(|name| TaskQuery::new(name, query_near_item(catalog, &mut rng, cfg.noise)))
                .collect();
            let filter = (!terms.is_empty() && rng.gen_bool(cfg.filter_prob))
                .then(|| random_filter(&mut rng, &terms, &cfg.filters));
            WorkloadQuery { tasks, filter }
        })
        .collect()
}
