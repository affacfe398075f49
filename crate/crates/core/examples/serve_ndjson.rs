//! Batched NDJSON serving over an in-memory stream, with a hot swap between
//! two engine versions.

use std::sync::Arc;

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::retrieval::{Engine, EngineConfig};
use filtra::serve::{serve_stream, BatchConfig, EngineHandle};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(5000, 8, 20, 7))?;
    let mut cfg = EngineConfig::new(8);
    let v1 = Engine::build(&catalog, &cfg)?;
    cfg.version = 2;
    cfg.ivf.seed = 1;
    let v2 = Engine::build(&catalog, &cfg)?;

    let handle = EngineHandle::new(Arc::new(v1));
    let user = "[0.5,0.1,-0.2,0.3,0.0,0.4,-0.1,0.2]";
    let input = format!(
        "{{\"id\":\"a\",\"tasks\":[{{\"name\":\"main\",\"user_embedding\":{user}}}],\"topk\":3}}\n\
         {{\"id\":\"b\",\"tasks\":[{{\"name\":\"main\",\"user_embedding\":{user}}}],\"topk\":3,\"filter\":\"1 = 2\"}}\n\
         {{\"id\":\"c\",\"mode\":\"esr\",\"tasks\":[{{\"name\":\"main\",\"user_embedding\":{user}}}],\"item_ids\":[1,2,3,4]}}\n\
         not json\n"
    );
    let cfg = BatchConfig::default();
    let mut out = Vec::new();
    let counters = serve_stream(&handle, input.as_bytes(), &mut out, &cfg)?;
    print!("{}", String::from_utf8(out)?);
    println!("{} requests in {} batches", counters.requests, counters.batches);

    handle.swap(Arc::new(v2));
    let mut out = Vec::new();
    serve_stream(&handle, input.lines().next().unwrap().as_bytes(), &mut out, &cfg)?;
    print!("after swap: {}", String::from_utf8(out)?);
    Ok(())
}
