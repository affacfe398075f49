//! Recall against nprobe, bloom false positive rate against bit budget, and
//! a short latency run.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::eval::{
    bench, catalog_terms, fpr_measure_leaves, query_near_item, recall_sweep, synth_workload, BenchConfig,
    WorkloadConfig, CSV_HEADER,
};
use filtra::filter::{bloom_fpr_theoretical, BloomIndex, BloomParams, ForwardIndex};
use filtra::retrieval::{Engine, EngineConfig};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(30_000, 32, 120, 9))?;
    let engine = Engine::build(&catalog, &EngineConfig::new(32))?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let queries: Vec<Vec<f32>> = (0..50).map(|_| query_near_item(&catalog, &mut rng, 0.3)).collect();
    for p in recall_sweep(&catalog, &engine.ivf, &queries, &[1, 4, 16, 64], 100)? {
        println!("nprobe {:>3}: recall@100 {:.3}", p.nprobe, p.mean_recall);
    }

    let forward = ForwardIndex::for_catalog(&catalog);
    let terms = catalog_terms(&catalog);
    for m in [256, 512, 1024] {
        let params = BloomParams::new(m, 5)?;
        let r = fpr_measure_leaves(&BloomIndex::for_catalog(&catalog, params), &forward, &terms);
        println!("M={m:>4}: measured {:.3e}, theory {:.3e}", r.rate, bloom_fpr_theoretical(&params, 10));
    }

    let mut wc = WorkloadConfig::new(300, 2);
    wc.filter_prob = 0.5;
    let workload = synth_workload(&catalog, &wc);
    let cfg = BenchConfig { warmup_batches: 5, timed_batches: 20, ..Default::default() };
    let report = bench(&engine, &workload, &cfg, Some(&catalog))?;
    println!("{CSV_HEADER}\n{}", report.csv_row());
    Ok(())
}
