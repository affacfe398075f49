//! Int8 IVF search against exact f32 brute force on a synthetic catalog.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::eval::{brute_force_f32, query_near_item, recall_at_k};
use filtra::ivf::{IvfConfig, IvfIndex, ScanStats};
use rand::SeedableRng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(50_000, 32, 200, 1))?;
    let ivf = IvfIndex::build(&catalog, &IvfConfig::default())?;
    println!("{} items in {} clusters, {} slots", ivf.n_items(), ivf.n_clusters(), ivf.n_slots());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let query = query_near_item(&catalog, &mut rng, 0.3);
    let truth = brute_force_f32(&catalog, &query, 100, None).ids();
    for nprobe in [1, 4, 16, 64] {
        let mut stats = ScanStats::default();
        let hits = ivf.search_with_stats(&query, nprobe, 100, None, &mut stats)?;
        println!(
            "nprobe {nprobe:>3}: recall@100 {:.3}, scanned {} items",
            recall_at_k(&hits.ids(), &truth, 100)?,
            stats.scanned_slots
        );
    }
    Ok(())
}
