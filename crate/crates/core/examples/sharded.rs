//! Partition a catalog over four shards and compare with a single engine.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::retrieval::{Engine, EngineConfig, RetrievalRequest, TaskQuery};
use filtra::serve::{Backend, ShardedEngine};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(40_000, 16, 100, 8))?;
    let cfg = EngineConfig::new(16);
    let single = Engine::build(&catalog, &cfg)?;
    let sharded = ShardedEngine::build(&catalog, &cfg, 4, 0)?;
    for (i, s) in sharded.shards().iter().enumerate() {
        println!("shard {i}: {} items, {} clusters", s.ivf.n_items(), s.ivf.n_clusters());
    }

    let mut req = RetrievalRequest::single(TaskQuery::new("main", catalog.items()[99].embedding.clone()), 16, 300, 10);
    req.filter = Some(single.parse_filter("1 = 0 OR 1 = 1 OR 1 = 2")?);
    let a = single.retrieve(&req)?;
    let b = Backend::retrieve(&sharded, &req)?;
    let ids = |r: &filtra::retrieval::RetrievalResponse| r.items.iter().map(|i| i.item_id).collect::<Vec<_>>();
    println!("single  {:?}", ids(&a));
    println!("sharded {:?}", ids(&b));
    Ok(())
}
