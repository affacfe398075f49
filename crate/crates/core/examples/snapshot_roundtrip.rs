//! Publish an engine to disk, inspect the header, load it back.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::retrieval::{EngineConfig, RetrievalRequest, TaskQuery};
use filtra::snapshot;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(10_000, 32, 50, 6))?;
    let mut cfg = EngineConfig::new(32);
    cfg.version = 42;
    let path = std::env::temp_dir().join("filtra-example.snap");
    let built = snapshot::publish(&catalog, &cfg, &path)?;
    println!("{}", serde_json::to_string_pretty(&snapshot::describe(&path)?)?);

    let loaded = snapshot::load(&path)?;
    let req = RetrievalRequest::single(TaskQuery::new("main", catalog.items()[17].embedding.clone()), 16, 200, 5);
    let a = built.retrieve(&req)?;
    let b = loaded.retrieve(&req)?;
    println!("same results after reload: {}", a.items == b.items);
    std::fs::remove_file(&path)?;
    Ok(())
}
