//! Acceptance suite. Each test prints one `PASS`/`FAIL` line on stderr
//! (bypassing output capture) and then asserts.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use filtra::catalog::{synth_catalog, Catalog, FeatureValue, SynthConfig};
use filtra::eval::{
    brute_force_f32, brute_force_int8, catalog_terms, fpr_measure_leaves, naive_filter_mask, query_near_item,
    random_filter, oracle_int8_score, oracle_quantize, recall_at_k, reference_retrieve, reference_score, reference_value, unfused_search, FilterGen,
};
use filtra::filter::{
    bloom_eval_leaf, bloom_fpr_theoretical, eval_compiled, forward_eval, hash_positions, inverted_eval, BloomIndex,
    BloomParams, FilterExpr, ForwardIndex, HashScheme, InvertedIndex,
};
use filtra::ivf::{IvfConfig, IvfIndex};
use filtra::quantize::{quantize_value, QuantParams};
use filtra::retrieval::{
    codesigned_search, merge_candidates, Engine, EngineConfig, MergePolicy, OverArchModel, RankedItem,
    RetrievalRequest, SearchScratch, SearchStats, TaskQuery, ValueExpr,
};
use filtra::serve::{
    handle_request, serve_stream, Backend, BatchConfig, EngineHandle, ServeDefaults, ShardedEngine, WireMode,
    WireRequest, WireResponse, WireTask,
};
use filtra::snapshot;

fn report(n: u32, name: &str, ok: bool, detail: String) {
    let line = format!("acceptance {n:02} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn synth(n: usize, dim: usize, blobs: usize, seed: u64) -> Catalog {
    synth_catalog(&SynthConfig::new(n, dim, blobs, seed)).unwrap()
}

fn engine_cfg(dim: usize, clusters: usize, m_bits: u32, seed: u64) -> EngineConfig {
    let mut cfg = EngineConfig::new(dim);
    cfg.ivf.n_clusters = Some(clusters);
    cfg.ivf.seed = seed;
    cfg.bloom = BloomParams::new(m_bits, 5).unwrap();
    cfg
}

fn random_query(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

fn same_ranking(a: &[RankedItem], b: &[RankedItem]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.item_id == y.item_id
                && x.score.to_bits() == y.score.to_bits()
                && x.task_scores.iter().map(|s| s.to_bits()).eq(y.task_scores.iter().map(|s| s.to_bits()))
        })
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn c01_exhaustive_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    let mut queries = 0;
    for i in 0..50 {
        let n = rng.gen_range(200..=20_000);
        let dim = [4, 8, 16, 32][rng.gen_range(0..4)];
        let blobs = rng.gen_range(1..=50).min(n);
        let c = synth(n, dim, blobs, 1000 + i);
        let clusters = rng.gen_range(1..=((n as f64).sqrt() as usize * 2).min(n));
        let ivf = IvfIndex::build(&c, &IvfConfig { n_clusters: Some(clusters), seed: i, max_iters: 8, ..Default::default() })
            .unwrap();
        for _ in 0..4 {
            let q = if rng.gen_bool(0.5) { random_query(&mut rng, dim) } else { query_near_item(&c, &mut rng, 0.3) };
            let topk = rng.gen_range(1..=300);
            let got = ivf.search(&q, clusters, topk, None).unwrap();
            let want = brute_force_int8(&c, ivf.quant_params(), &q, topk, None);
            queries += 1;
            if got.entries != want.entries {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "exhaustive IVF equals int8 brute force",
        mismatches == 0 && secs < 120.0,
        format!("50 catalogs, {queries} queries, {mismatches} mismatches, {secs:.1}s"),
    );
}

#[test]
fn c02_codesign_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    let mut instances = 0;
    let mut nonempty = 0;
    for i in 0..40u64 {
        let n = rng.gen_range(100..=4000);
        let dim = [4, 8, 16][rng.gen_range(0..3)];
        let c = synth(n, dim, rng.gen_range(1..=20), 2000 + i);
        let m = [64, 256, 1024][rng.gen_range(0..3)];
        let clusters = rng.gen_range(1..=((n as f64).sqrt() as usize * 2));
        let e = Engine::build(&c, &engine_cfg(dim, clusters, m, i)).unwrap();
        let terms = catalog_terms(&c);
        for _ in 0..5 {
            let g = FilterGen { allow_not: true, ..Default::default() };
            let f = random_filter(&mut rng, &terms, &g);
            let cf = e.compile(&f);
            let q = query_near_item(&c, &mut rng, 0.3);
            let nprobe = rng.gen_range(1..=clusters);
            let k0 = rng.gen_range(1..=500);
            let mut st = SearchStats::default();
            let a = codesigned_search(&e.ivf, &e.bloom, Some(&cf), &q, nprobe, k0, &mut SearchScratch::default(), &mut st)
                .unwrap();
            let b = unfused_search(&e, Some(&cf), &q, nprobe, k0, &mut SearchStats::default()).unwrap();
            instances += 1;
            nonempty += usize::from(!a.entries.is_empty());
            if a.entries != b.entries {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "co-designed search equals full mask then masked search",
        instances == 200 && mismatches == 0 && secs < 120.0,
        format!("{instances} instances ({nonempty} non-empty), {mismatches} mismatches, {secs:.1}s"),
    );
}

#[test]
fn c03_bloom_superset() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (mut queries, mut false_neg, mut false_pos) = (0, 0usize, 0usize);
    for i in 0..20u64 {
        let c = synth(rng.gen_range(50..=3000), 4, 5, 3000 + i);
        let m = [32, 64, 128, 512, 1024][rng.gen_range(0..5)];
        let bloom = BloomIndex::for_catalog(&c, BloomParams::new(m, rng.gen_range(1..=6)).unwrap());
        let fi = ForwardIndex::for_catalog(&c);
        let terms = catalog_terms(&c);
        let g = FilterGen { allow_not: false, ..Default::default() };
        for _ in 0..50 {
            let f = random_filter(&mut rng, &terms, &g);
            assert!(!f.contains_not());
            let cf = filtra::filter::compile_filter(&f, bloom.params());
            let b = eval_compiled(&cf, &bloom, &fi.valid, None);
            let exact = forward_eval(&fi, &f, None);
            for s in 0..c.len() {
                match (exact.get(s), b.get(s)) {
                    (true, false) => false_neg += 1,
                    (false, true) => false_pos += 1,
                    _ => {}
                }
            }
            queries += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "bloom mask is a superset of the exact mask",
        queries == 1000 && false_neg == 0 && secs < 60.0,
        format!("{queries} queries, {false_neg} false negatives, {false_pos} false positives, {secs:.1}s"),
    );
}

#[test]
fn c04_filter_oracles_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let (mut queries, mut with_not, mut disagree) = (0, 0, 0);
    for i in 0..10u64 {
        let c = synth(rng.gen_range(20..=5000), 4, 3, 4000 + i);
        let fi = ForwardIndex::for_catalog(&c);
        let ii = InvertedIndex::for_catalog(&c);
        let terms = catalog_terms(&c);
        let g = FilterGen { allow_not: true, max_depth: 4, ..Default::default() };
        for _ in 0..100 {
            let f = random_filter(&mut rng, &terms, &g);
            with_not += usize::from(f.contains_not());
            let a = forward_eval(&fi, &f, None);
            let b = inverted_eval(&ii, &f);
            let naive = naive_filter_mask(&c, &f);
            let ok = a == b && naive.iter().enumerate().all(|(s, &v)| a.get(s) == v) && a.count_ones() == naive.iter().filter(|&&v| v).count();
            disagree += usize::from(!ok);
            queries += 1;
        }
    }
    report(
        4,
        "forward, inverted and naive filters agree",
        queries == 1000 && disagree == 0 && with_not > 0,
        format!("{queries} queries ({with_not} with NOT), {disagree} disagreements"),
    );
}

/// Hits of `leaves` absent leaves over every item, and a forward-index
/// cross-check on the first few.
fn absent_leaf_hits(c: &Catalog, fi: &ForwardIndex, params: BloomParams, leaves: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let present: HashSet<FeatureValue> = catalog_terms(c).into_iter().collect();
    let bloom = BloomIndex::for_catalog(c, params);
    let mut scratch = filtra::bitmask::BitMask::zeros(bloom.n_slots());
    let mut hits = 0;
    let mut probe = Vec::new();
    for _ in 0..leaves {
        let fv = FeatureValue::new(rng.gen_range(100..10_000), rng.gen());
        assert!(!present.contains(&fv));
        bloom_eval_leaf(&bloom, &hash_positions(fv, &params), &mut scratch);
        scratch.and_assign(&fi.valid);
        hits += scratch.count_ones();
        if probe.len() < 20 {
            probe.push(fv);
        }
    }
    let checked = fpr_measure_leaves(&bloom, fi, &probe);
    (hits, checked.false_negatives)
}

#[test]
fn c05_fpr_law() {
    let start = Instant::now();
    let n_items = 200_000;
    let terms_per_item = 10;
    let c = synth(n_items, 2, 1, 505);
    assert!(c.items().iter().all(|it| it.features.len() == terms_per_item));
    let fi = ForwardIndex::for_catalog(&c);
    let mut rng = ChaCha8Rng::seed_from_u64(5050);
    let mut lines = Vec::new();
    let mut ok = true;
    let mut rates = Vec::new();
    for m in [512u32, 1024, 2048] {
        let params = BloomParams::new(m, 5).unwrap();
        let theory = bloom_fpr_theoretical(&params, terms_per_item);
        // At least 1e7 trials and about 100 expected hits.
        let leaves = ((100.0 / theory / n_items as f64).ceil() as usize).max(1_000);
        let (hits, false_neg) = absent_leaf_hits(&c, &fi, params, leaves, &mut rng);
        let trials = leaves as f64 * n_items as f64;
        let rate = hits as f64 / trials;
        let ratio = rate / theory;
        ok &= (0.25..=4.0).contains(&ratio) && trials >= 1e7 && false_neg == 0;
        rates.push(rate);
        lines.push(format!("M={m}: {hits} hits in {trials:.2e} trials, rate {rate:.3e} vs {theory:.3e} (x{ratio:.2})"));
    }
    let decreasing = rates.windows(2).all(|w| w[1] < w[0]);

    // The plain double-hash recipe, for the record: its position sets are
    // fixed by (h1 mod M, h2 mod M), which floors the rate near 4n/M^2.
    let plain = BloomParams::new(1024, 5).unwrap().with_scheme(HashScheme::Fnv1aSplitMix);
    let (hits, _) = absent_leaf_hits(&c, &fi, plain, 1_000, &mut rng);
    let plain_rate = hits as f64 / (1_000.0 * n_items as f64);
    let secs = start.elapsed().as_secs_f64();
    report(
        5,
        "bloom FPR law",
        ok && decreasing,
        format!(
            "{}; decreasing={decreasing}; plain double hashing at M=1024: {plain_rate:.3e} (floor {:.3e}); {secs:.1}s",
            lines.join("; "),
            4.0 * terms_per_item as f64 / (1024.0 * 1024.0)
        ),
    );
}

fn kendall_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = a[i] - a[j];
            let db = b[i] - b[j];
            if da == 0.0 && db == 0.0 {
                continue;
            } else if da == 0.0 {
                ties_a += 1;
            } else if db == 0.0 {
                ties_b += 1;
            } else if (da > 0.0) == (db > 0.0) {
                conc += 1;
            } else {
                disc += 1;
            }
        }
    }
    let n0 = (conc + disc) as f64;
    (conc - disc) as f64 / ((n0 + ties_a as f64) * (n0 + ties_b as f64)).sqrt()
}

#[test]
fn c06_quantization_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    let mut violations = 0;
    for r in 0..10 {
        let lo: f32 = rng.gen_range(-100.0..1.0);
        let hi: f32 = lo + [1e-3f32, 0.1, 1.0, 2.0, 50.0][r % 5];
        let p = QuantParams::from_range(lo, hi).unwrap();
        for _ in 0..100_000 {
            let x: f32 = rng.gen_range(lo..=hi);
            let back = p.dequantize(quantize_value(x, &p)) as f64;
            // The dequantized value is rounded to f32 once.
            let bound = p.half_step() + f32::EPSILON as f64 * back.abs().max(x.abs() as f64);
            let err = (back - x as f64).abs();
            worst = worst.max(err / p.half_step());
            violations += usize::from(err > bound);
        }
    }

    let mut taus = Vec::new();
    for seed in 0..4u64 {
        let c = synth(20_000, 32, 100, 6000 + seed);
        let ivf = IvfIndex::build(&c, &IvfConfig { n_clusters: Some(1), ..Default::default() }).unwrap();
        let qp = *ivf.quant_params();
        for _ in 0..10 {
            let q = query_near_item(&c, &mut rng, 0.3);
            let top = brute_force_f32(&c, &q, c.len() / 100, None);
            let by_id: HashMap<u64, usize> = c.items().iter().enumerate().map(|(i, it)| (it.item_id, i)).collect();
            let qq: Vec<i8> = q.iter().map(|&x| oracle_quantize(x, &qp)).collect();
            let f: Vec<f64> = top.entries.iter().map(|s| s.score as f64).collect();
            let i8s: Vec<f64> = top
                .entries
                .iter()
                .map(|s| {
                    let emb: Vec<i8> = c.items()[by_id[&s.item_id]].embedding.iter().map(|&x| oracle_quantize(x, &qp)).collect();
                    oracle_int8_score(&qq, &emb, &qp) as f64
                })
                .collect();
            taus.push(kendall_tau_b(&f, &i8s));
        }
    }
    let mean_tau = taus.iter().sum::<f64>() / taus.len() as f64;
    let min_tau = taus.iter().copied().fold(f64::INFINITY, f64::min);
    report(
        6,
        "quantization error and rank agreement",
        violations == 0 && mean_tau >= 0.9,
        format!("1e6 values, {violations} over half-step, worst {worst:.4} steps; Kendall tau over top 1%: mean {mean_tau:.3}, min {min_tau:.3} ({} queries)", taus.len()),
    );
}

struct Big {
    catalog: Catalog,
    ivf: IvfIndex,
    build_secs: f64,
}

fn big() -> &'static Big {
    static BIG: OnceLock<Big> = OnceLock::new();
    BIG.get_or_init(|| {
        let t = Instant::now();
        let catalog = synth(100_000, 32, 316, 707);
        let ivf = IvfIndex::build(&catalog, &IvfConfig { n_clusters: Some(316), seed: 7, ..Default::default() }).unwrap();
        Big { catalog, ivf, build_secs: t.elapsed().as_secs_f64() }
    })
}

#[test]
fn c07_recall_monotone() {
    let b = big();
    let mut rng = ChaCha8Rng::seed_from_u64(7070);
    let k = 1024;
    let queries: Vec<Vec<f32>> = (0..30).map(|_| query_near_item(&b.catalog, &mut rng, 0.3)).collect();
    let truths: Vec<Vec<u64>> = queries.iter().map(|q| brute_force_f32(&b.catalog, q, k, None).ids()).collect();
    let mut curve = Vec::new();
    for np in [1, 2, 4, 8, 16, 32, 64] {
        let mut sum = 0.0;
        for (q, t) in queries.iter().zip(&truths) {
            sum += recall_at_k(&b.ivf.search(q, np, k, None).unwrap().ids(), t, k).unwrap();
        }
        curve.push((np, sum / queries.len() as f64));
    }
    let monotone = curve.windows(2).all(|w| w[1].1 >= w[0].1);
    let at64 = curve.last().unwrap().1;
    let shown: Vec<String> = curve.iter().map(|(np, r)| format!("{np}:{r:.4}")).collect();
    report(
        7,
        "recall@1024 non-decreasing in nprobe",
        monotone && at64 >= 0.95,
        format!("n=100000, 316 clusters, 30 queries; {} (index build {:.1}s)", shown.join(" "), b.build_secs),
    );
}

#[test]
fn c08_large_topk() {
    let b = big();
    let mut rng = ChaCha8Rng::seed_from_u64(8080);
    let mut ok = true;
    let mut detail = Vec::new();
    for _ in 0..2 {
        let q = query_near_item(&b.catalog, &mut rng, 0.3);
        let got = b.ivf.search(&q, b.ivf.n_clusters(), 20_000, None).unwrap();
        let want = brute_force_int8(&b.catalog, b.ivf.quant_params(), &q, 20_000, None);
        let same = got.entries == want.entries;
        ok &= same && got.len() == 20_000;
        detail.push(format!("{} items, equal={same}", got.len()));
    }
    report(8, "topk=20000 over 100k items", ok, detail.join("; "));
}

fn wire_request(rng: &mut ChaCha8Rng, c: &Catalog, id: usize) -> WireRequest {
    let esr = rng.gen_bool(0.3);
    let n_tasks = rng.gen_range(1..=2);
    let tasks = ["like", "share"][..n_tasks]
        .iter()
        .map(|n| WireTask { name: n.to_string(), user_embedding: query_near_item(c, rng, 0.3) })
        .collect();
    let filter = match rng.gen_range(0..4) {
        0 => None,
        1 => Some("f1 = 3 OR f2 = 4".to_string()),
        2 => Some("NOT f3 = 7 AND (f1 = 1 OR f1 = 2)".to_string()),
        _ => Some("f9 = 1".to_string()),
    };
    WireRequest {
        id: format!("r{id}"),
        mode: if esr { WireMode::Esr } else { WireMode::Retrieve },
        tasks,
        filter: (!esr).then_some(filter).flatten(),
        nprobe: Some(rng.gen_range(1..=20)),
        k0: Some(rng.gen_range(10..=200)),
        topk: Some(rng.gen_range(1..=30)),
        merge: Some(if rng.gen_bool(0.5) { MergePolicy::Union } else { MergePolicy::Intersection }),
        item_ids: esr.then(|| (0..rng.gen_range(0..80)).map(|_| rng.gen_range(0..c.len() as u64 + 5)).collect()),
        value_model: None,
    }
}

#[test]
fn c09_batching_transparent() {
    let c = synth(3000, 16, 20, 909);
    let mut cfg = engine_cfg(16, 40, 1024, 9);
    cfg.overarch = OverArchModel::random_mlp(16, &[24], &["like", "share"], true, 9);
    let e = Arc::new(Engine::build(&c, &cfg).unwrap());
    let d = ServeDefaults::default();
    let handle = EngineHandle::new(e.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(9090);
    let (mut requests, mut mismatches, mut errors) = (0, 0, 0);
    for b in 0..100 {
        let size = rng.gen_range(1..=16);
        let reqs: Vec<WireRequest> = (0..size).map(|i| wire_request(&mut rng, &c, b * 100 + i)).collect();
        let sequential: Vec<WireResponse> = reqs.iter().map(|r| handle_request(e.as_ref(), r, &d).without_timing()).collect();
        let input: String = reqs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        let mut out = Vec::new();
        let bc = BatchConfig { max_batch: 16, timeout: Duration::from_millis(50), ..Default::default() };
        serve_stream(&handle, input.as_bytes(), &mut out, &bc).unwrap();
        let batched: Vec<WireResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<WireResponse>(l).unwrap().without_timing())
            .collect();
        requests += size;
        errors += sequential.iter().filter(|r| r.is_error()).count();
        mismatches += usize::from(batched != sequential);
    }
    report(
        9,
        "batched responses equal sequential responses",
        mismatches == 0,
        format!("100 batches, {requests} requests ({errors} error responses), {mismatches} mismatching batches"),
    );
}

/// Scores every filter-admitted item with the scorer and the default value
/// model, f64, best first.
fn global_brute_force(c: &Catalog, e: &Engine, req: &RetrievalRequest) -> Vec<RankedItem> {
    let admit: Vec<bool> = match &req.filter {
        None => vec![true; c.len()],
        Some(f) => {
            let bloom = BloomIndex::for_catalog(c, *e.bloom.params());
            let cf = filtra::filter::compile_filter(f, bloom.params());
            let m = eval_compiled(&cf, &bloom, &filtra::bitmask::BitMask::ones(c.len()), None);
            (0..c.len()).map(|i| m.get(i)).collect()
        }
    };
    let names: Vec<&str> = req.tasks.iter().map(|t| t.name.as_str()).collect();
    let vm = ValueExpr::sum_of(&names);
    let mut all: Vec<RankedItem> = c
        .items()
        .iter()
        .zip(&admit)
        .filter(|(_, &a)| a)
        .map(|(it, _)| {
            let ts: Vec<f64> = req
                .tasks
                .iter()
                .map(|t| reference_score(&e.overarch, &t.name, &t.user_embedding, &it.embedding).unwrap())
                .collect();
            let named: HashMap<&str, f64> = names.iter().copied().zip(ts.iter().copied()).collect();
            RankedItem { item_id: it.item_id, score: reference_value(&vm, &named).unwrap(), task_scores: ts }
        })
        .collect();
    all.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.item_id.cmp(&b.item_id)));
    all.truncate(req.topk);
    all
}

#[test]
fn c10_sharding() {
    let c = synth(6000, 16, 30, 1010);
    let cfg = engine_cfg(16, 40, 1024, 10);
    let e = Engine::build(&c, &cfg).unwrap();
    let s1 = ShardedEngine::build(&c, &cfg, 1, 3).unwrap();
    let s4 = ShardedEngine::build(&c, &cfg, 4, 3).unwrap();
    let max_shard = s4.shards().iter().map(|s| s.ivf.n_items()).max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10_100);
    let filters = [None, Some("f1 = 2 OR f2 = 3"), Some("NOT f1 = 4"), Some("f3 = 1 AND f4 = 2")];
    let (mut s1_bad, mut cand_bad, mut final_bad, mut cases) = (0, 0, 0, 0);
    for i in 0..40 {
        let mut req = RetrievalRequest::single(TaskQuery::new("t0", query_near_item(&c, &mut rng, 0.3)), 8, 300, 25);
        if i % 2 == 0 {
            req.tasks.push(TaskQuery::new("t1", query_near_item(&c, &mut rng, 0.3)));
        }
        req.filter = filters[i % 4].map(|f| e.parse_filter(f).unwrap());
        cases += 1;

        // S=1 against the unsharded engine, approximate probing.
        let a = e.retrieve(&req).unwrap().items;
        let b = Backend::retrieve(&s1, &req).unwrap().items;
        s1_bad += usize::from(!same_ranking(&a, &b));

        // S=4, exhaustive probing: gathered candidates cover the global
        // int8 top-k0 of each task.
        req.nprobe = usize::MAX;
        let gathered = s4.gathered_candidates(&req, &mut SearchStats::default()).unwrap();
        let admit = req.filter.as_ref().map(|f| {
            let bloom = BloomIndex::for_catalog(&c, *e.bloom.params());
            let cf = filtra::filter::compile_filter(f, bloom.params());
            let m = eval_compiled(&cf, &bloom, &filtra::bitmask::BitMask::ones(c.len()), None);
            (0..c.len()).map(|i| m.get(i)).collect::<Vec<bool>>()
        });
        for (t, g) in req.tasks.iter().zip(&gathered) {
            let want = brute_force_int8(&c, e.ivf.quant_params(), &t.user_embedding, req.k0, admit.as_deref());
            let have: HashSet<u64> = g.iter().copied().collect();
            cand_bad += usize::from(!want.ids().iter().all(|id| have.contains(id)));
        }

        // S=4 with every shard returning all its items: final ranking equals
        // scoring the whole catalog.
        req.k0 = max_shard;
        let got = Backend::retrieve(&s4, &req).unwrap().items;
        let want = global_brute_force(&c, &e, &req);
        final_bad += usize::from(!same_ranking(&got, &want));
    }
    report(
        10,
        "sharded retrieval",
        s1_bad == 0 && cand_bad == 0 && final_bad == 0,
        format!("{cases} requests; S=1 mismatches {s1_bad}; S=4 candidate misses {cand_bad}; S=4 final mismatches {final_bad}"),
    );
}

#[test]
fn c11_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let c = synth(4000, 16, 20, 1111);
    let mut cfg = engine_cfg(16, 50, 512, 11);
    cfg.overarch = OverArchModel::random_mlp(16, &[16], &["like", "share"], true, 11);
    cfg.value_model = Some(ValueExpr::weighted(&[(0.7, "like"), (0.3, "share")]));
    cfg.version = 1;
    let path = dir.path().join("v1.snap");
    let mem = snapshot::publish(&c, &cfg, &path).unwrap();
    let loaded = snapshot::load(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11_110);
    let mut diff = 0;
    for i in 0..50 {
        let mut req = RetrievalRequest::single(TaskQuery::new("like", query_near_item(&c, &mut rng, 0.3)), 6, 200, 20);
        req.tasks.push(TaskQuery::new("share", query_near_item(&c, &mut rng, 0.3)));
        if i % 2 == 0 {
            req.filter = Some(mem.parse_filter("f1 = 1 OR NOT f2 = 2").unwrap());
        }
        diff += usize::from(!same_ranking(&mem.retrieve(&req).unwrap().items, &loaded.retrieve(&req).unwrap().items));
    }

    // One flipped byte at several offsets of every section, and in the header.
    let bytes = std::fs::read(&path).unwrap();
    let header = snapshot::read_header(&bytes).unwrap();
    let mut flips = 0;
    let mut undetected = 0;
    let first_section = header.sections.iter().map(|s| s.offset).min().unwrap() as usize;
    let mut targets: Vec<usize> = (0..first_section).step_by(7).collect();
    for s in &header.sections {
        let (off, len) = (s.offset as usize, s.len as usize);
        if len == 0 {
            continue;
        }
        targets.extend([off, off + len - 1, off + len / 2, off + rng.gen_range(0..len)]);
    }
    for t in targets {
        let mut b = bytes.clone();
        b[t] ^= 1 << rng.gen_range(0..8);
        flips += 1;
        undetected += usize::from(snapshot::decode(&b).is_ok());
    }

    // Hot swap under load.
    cfg.version = 2;
    cfg.ivf.seed = 99;
    cfg.overarch = OverArchModel::random_mlp(16, &[16], &["like", "share"], true, 12);
    let next = Arc::new(snapshot::publish(&c, &cfg, &dir.path().join("v2.snap")).unwrap());
    let handle = Arc::new(EngineHandle::new(Arc::new(loaded)));
    let d = ServeDefaults::default();
    let reqs: Vec<WireRequest> = (0..16)
        .map(|i| {
            let mut r = wire_request(&mut rng, &c, i);
            r.mode = WireMode::Retrieve;
            r.item_ids = None;
            r.tasks = ["like", "share"]
                .iter()
                .map(|n| WireTask { name: n.to_string(), user_embedding: query_near_item(&c, &mut rng, 0.3) })
                .collect();
            r.filter = None;
            r
        })
        .collect();
    let expected: HashMap<(u64, usize), WireResponse> = [(1u64, handle.load()), (2, next.clone() as Arc<dyn Backend>)]
        .iter()
        .flat_map(|(v, b)| reqs.iter().enumerate().map(move |(i, r)| ((*v, i), handle_request(b.as_ref(), r, &d).without_timing())))
        .collect();
    assert_ne!(expected[&(1, 0)].items, expected[&(2, 0)].items);
    let served = Arc::new(AtomicUsize::new(0));
    let total = 10_000;
    let workers: Vec<_> = (0..2)
        .map(|w| {
            let (handle, served, reqs, expected) = (handle.clone(), served.clone(), reqs.clone(), expected.clone());
            std::thread::spawn(move || {
                let (mut mixed, mut seen) = (0, [0usize; 3]);
                let mut i = w;
                while served.fetch_add(1, Ordering::SeqCst) < total {
                    let backend = handle.load();
                    let k = i % reqs.len();
                    let r = handle_request(backend.as_ref(), &reqs[k], &d).without_timing();
                    let v = r.snapshot_version;
                    seen[v as usize] += 1;
                    mixed += usize::from(expected.get(&(v, k)) != Some(&r));
                    i += 2;
                }
                (mixed, seen)
            })
        })
        .collect();
    while served.load(Ordering::SeqCst) < total / 2 {
        std::thread::yield_now();
    }
    let old = handle.swap(next);
    let (mut mixed, mut seen) = (0, [0usize; 3]);
    for w in workers {
        let (m, s) = w.join().unwrap();
        mixed += m;
        seen[1] += s[1];
        seen[2] += s[2];
    }
    report(
        11,
        "snapshot round trip, corruption and hot swap",
        diff == 0 && undetected == 0 && mixed == 0 && seen[1] > 0 && seen[2] > 0 && seen[1] + seen[2] == total && old.version() == 1,
        format!(
            "50 requests, {diff} differ; {flips} single-byte flips over {} sections, {undetected} undetected; {} requests across swap (v1 {}, v2 {}), {mixed} inconsistent",
            header.sections.len(),
            seen[1] + seen[2],
            seen[1],
            seen[2]
        ),
    );
}

#[test]
fn c12_pipeline_replay() {
    let c = synth(10_000, 24, 40, 1212);
    let tasks = ["click", "like", "share"];
    let mut cfg = engine_cfg(24, 100, 1024, 12);
    cfg.overarch = OverArchModel::random_mlp(24, &[32, 16], &tasks, true, 12);
    let vm: ValueExpr = serde_json::from_str(
        r#"{"op":"add","args":[
            {"op":"mul","args":[{"op":"const","value":0.5},{"op":"task","task":"click"}]},
            {"op":"clamp","arg":{"op":"task","task":"like"},"lo":-0.5,"hi":0.5},
            {"op":"if","cond":{"left":{"op":"task","task":"share"},"cmp":">","right":{"op":"const","value":0.0}},
             "then":{"op":"max","args":[{"op":"task","task":"share"},{"op":"task","task":"click"}]},
             "else":{"op":"const","value":-1.0}}]}"#,
    )
    .unwrap();
    cfg.value_model = Some(vm);
    let e = Engine::build(&c, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12_120);
    let filters = ["f1 = 1 OR f1 = 2 OR f2 = 5", "NOT f3 = 4 AND (f4 = 7 OR f5 = 9 OR f1 = 3)", "NOT f2 = 1"];
    let (mut discrete_bad, mut float_bad, mut worst) = (0, 0, 0.0f64);
    let mut sizes = Vec::new();
    for i in 0..9 {
        let mut req = RetrievalRequest::single(TaskQuery::new(tasks[0], query_near_item(&c, &mut rng, 0.3)), 20, 500, 50);
        for t in &tasks[1..] {
            req.tasks.push(TaskQuery::new(t, query_near_item(&c, &mut rng, 0.3)));
        }
        req.filter = Some(e.parse_filter(filters[i % 3]).unwrap());
        req.merge = if i % 2 == 0 { MergePolicy::Union } else { MergePolicy::Intersection };
        let want = reference_retrieve(&c, &e, &req).unwrap();

        let cf = e.compile(req.filter.as_ref().unwrap());
        let per_task = e.candidates(&req, Some(&cf), &mut SearchScratch::default(), &mut SearchStats::default()).unwrap();
        let per_task: Vec<Vec<(u64, i32)>> = per_task.iter().map(|r| r.entries.iter().map(|s| (s.item_id, s.score)).collect()).collect();
        let sets: Vec<Vec<u64>> = per_task.iter().map(|p| p.iter().map(|x| x.0).collect()).collect();
        let merged = merge_candidates(&sets, req.merge);
        let got = e.retrieve(&req).unwrap().items;
        sizes.push(merged.len());

        let final_ids: Vec<u64> = got.iter().map(|x| x.item_id).collect();
        let want_ids: Vec<u64> = want.final_items.iter().map(|x| x.item_id).collect();
        discrete_bad += usize::from(per_task != want.per_task || merged != want.merged || final_ids != want_ids);
        for (a, b) in got.iter().zip(&want.final_items) {
            let pairs = std::iter::once((a.score, b.score)).chain(a.task_scores.iter().copied().zip(b.task_scores.iter().copied()));
            for (x, y) in pairs {
                worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(1e-12));
                float_bad += usize::from(!rel_close(x, y, 1e-5));
            }
        }
    }
    report(
        12,
        "pipeline matches staged reference replay",
        discrete_bad == 0 && float_bad == 0,
        format!("9 requests, T=3, k0=500, merged sizes {sizes:?}; discrete mismatches {discrete_bad}, float mismatches {float_bad}, worst rel diff {worst:.2e}"),
    );
}

#[test]
fn c13_memory_law() {
    let mut lines = Vec::new();
    let mut ok = true;
    for (m, n) in [(64u32, 1usize), (256, 63), (1024, 64), (2048, 1000), (4096, 12_345)] {
        let c = synth(n, 4, 1, n as u64);
        let bloom = BloomIndex::for_catalog(&c, BloomParams::new(m, 5).unwrap());
        let want = m as usize * n.div_ceil(64) * 8;
        let good = bloom.plane_bytes() == want && bloom.raw_planes().len() * 8 == want;
        ok &= good;
        lines.push(format!("M={m} n={n}: {} bytes", bloom.plane_bytes()));
    }

    let c = synth(8000, 8, 20, 1313);
    let e = Engine::build(&c, &engine_cfg(8, 90, 512, 13)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13_130);
    let terms = catalog_terms(&c);
    let mut counter_bad = 0;
    for i in 0..100 {
        let q = query_near_item(&c, &mut rng, 0.3);
        let nprobe = rng.gen_range(1..=90);
        let f: Option<FilterExpr> = (i % 3 != 0).then(|| random_filter(&mut rng, &terms, &FilterGen::default()));
        let cf = f.as_ref().map(|f| e.compile(f));
        let mut st = SearchStats::default();
        codesigned_search(&e.ivf, &e.bloom, cf.as_ref(), &q, nprobe, 100, &mut SearchScratch::default(), &mut st).unwrap();
        let probed: BTreeSet<u32> = e.ivf.probe_centroids(&q, nprobe).unwrap().into_iter().collect();
        let expect: usize = probed.iter().map(|&p| e.ivf.clusters()[p as usize].len).sum();
        counter_bad += usize::from(st.scan.scanned_slots != expect || st.probed_clusters != probed.len());
    }
    ok &= counter_bad == 0;
    report(
        13,
        "plane bytes and scanned-slot accounting",
        ok,
        format!("{}; 100 searches, {counter_bad} counter mismatches", lines.join(", ")),
    );
}
