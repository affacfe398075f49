//! Two-task retrieval with an MLP scorer and a custom value model, then
//! re-ranking a fixed candidate list.

use filtra::catalog::{synth_catalog, SynthConfig};
use filtra::retrieval::{Engine, EngineConfig, MergePolicy, OverArchModel, RetrievalRequest, TaskQuery, ValueExpr};
use rand::{Rng, SeedableRng};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let catalog = synth_catalog(&SynthConfig::new(20_000, 16, 80, 4))?;
    let mut cfg = EngineConfig::new(16);
    cfg.overarch = OverArchModel::random_mlp(16, &[64, 32], &["like", "share"], true, 11);
    let engine = Engine::build(&catalog, &cfg)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let mut user = || (0..16).map(|_| rng.gen_range(-1.0f32..1.0)).collect::<Vec<_>>();
    let tasks = vec![TaskQuery::new("like", user()), TaskQuery::new("share", user())];
    let value = ValueExpr::from_json(
        r#"{"op":"if","cond":{"left":{"op":"task","task":"share"},"cmp":">","right":{"op":"const","value":0.8}},
            "then":{"op":"mul","args":[{"op":"const","value":2.0},{"op":"task","task":"like"}]},
            "else":{"op":"task","task":"like"}}"#,
    )?;

    let req = RetrievalRequest {
        tasks: tasks.clone(),
        filter: Some(engine.parse_filter("3 = 10 OR 3 = 11 OR 3 = 12")?),
        nprobe: 32,
        k0: 500,
        topk: 10,
        merge: MergePolicy::Union,
        value_model: Some(value.clone()),
    };
    let resp = engine.retrieve(&req)?;
    println!("merged {} candidates", resp.stats.merged_candidates);
    for it in &resp.items {
        println!("{:>6} value {:+.4} like {:+.4} share {:+.4}", it.item_id, it.score, it.task_scores[0], it.task_scores[1]);
    }

    let ids: Vec<u64> = (0..5000).collect();
    let esr = engine.esr(&tasks, &ids, 5, Some(&value))?;
    println!("top of 5000 re-ranked: {:?}", esr.items.iter().map(|i| i.item_id).collect::<Vec<_>>());
    Ok(())
}
