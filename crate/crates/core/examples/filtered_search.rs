//! Filtered search where the filter is evaluated only over probed clusters.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::eval::{brute_force_f32, naive_filter_mask, query_near_item, recall_at_k};
use filtra::retrieval::{codesigned_search, Engine, EngineConfig, SearchScratch, SearchStats};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(40_000, 32, 150, 2))?;
    let engine = Engine::build(&catalog, &EngineConfig::new(32))?;
    // feature 1 has 20 values, feature 2 has 50
    let expr = engine.parse_filter("(1 = 3 OR 1 = 4) AND NOT 2 = 7")?;
    let cf = engine.compile(&expr);

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let query = query_near_item(&catalog, &mut rng, 0.3);
    let admit = naive_filter_mask(&catalog, &expr);
    let truth = brute_force_f32(&catalog, &query, 50, Some(&admit)).ids();
    println!("{} of {} items pass the filter", admit.iter().filter(|&&a| a).count(), catalog.len());

    let mut scratch = SearchScratch::default();
    for nprobe in [8, 32, 128] {
        let mut stats = SearchStats::default();
        let hits = codesigned_search(&engine.ivf, &engine.bloom, Some(&cf), &query, nprobe, 50, &mut scratch, &mut stats)?;
        println!(
            "nprobe {nprobe:>3}: recall@50 {:.3}, filter slots {}, scored {}",
            recall_at_k(&hits.ids(), &truth, 50)?,
            stats.filter.slots_evaluated,
            stats.scan.scored_slots
        );
    }
    Ok(())
}
