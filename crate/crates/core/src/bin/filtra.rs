use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use filtra::catalog::{load_catalog, save_catalog, synth_catalog, Catalog, CatalogFormat, Item, LoadOptions, SynthConfig};
use filtra::eval::{self, BenchConfig, FilterGen, WorkloadConfig};
use filtra::filter::{BloomIndex, BloomParams, ForwardIndex, HashScheme};
use filtra::ivf::{IvfConfig, IvfIndex};
use filtra::retrieval::{Engine, EngineConfig, OverArchModel, ValueExpr};
use filtra::serve::{self, Backend, BatchConfig, EngineHandle, ServeDefaults, ShardedEngine};
use filtra::snapshot;

#[derive(Parser)]
#[command(name = "filtra", version, about = "Filtered int8 IVF retrieval engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic catalog
    Synth {
        #[command(flatten)]
        synth: SynthArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CatalogFormat,
    },
    /// Build a snapshot from a catalog
    Build(BuildArgs),
    /// Serve NDJSON requests over TCP and/or stdin
    Serve(ServeArgs),
    /// Answer the requests in a file and exit
    Query {
        #[command(flatten)]
        snap: SnapArgs,
        /// Request file (one JSON object per line); `-` reads stdin
        #[arg(long)]
        req: PathBuf,
        #[command(flatten)]
        knobs: KnobArgs,
    },
    /// Measure latency and throughput on a synthetic workload
    Bench(BenchArgs),
    /// Quality measurements
    Eval {
        #[command(subcommand)]
        kind: EvalCmd,
    },
    /// Print a snapshot header as JSON
    Describe {
        #[arg(long)]
        snapshot: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 10_000)]
    items: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Gaussian blobs in the generator
    #[arg(long, default_value_t = 100)]
    blobs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Clone)]
struct CatalogArgs {
    /// Catalog file; when absent a synthetic catalog is generated
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value = "jsonl")]
    format: CatalogFormat,
    /// Feature schema TSV (`id<TAB>name`)
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Feature value TSV (`feature<TAB>string<TAB>id`)
    #[arg(long)]
    values: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
}

impl CatalogArgs {
    fn load(&self) -> Result<Catalog, CliError> {
        match &self.catalog {
            Some(p) => {
                let mut opts = LoadOptions::default();
                if let Some(s) = &self.schema {
                    opts.dictionary.load_schema(s)?;
                }
                if let Some(v) = &self.values {
                    opts.dictionary.load_values(v)?;
                }
                Ok(load_catalog(p, self.format, opts)?)
            }
            None => {
                let s = &self.synth;
                Ok(synth_catalog(&SynthConfig::new(s.items, s.dim, s.blobs, s.seed))?)
            }
        }
    }
}

#[derive(Args)]
struct BuildArgs {
    #[command(flatten)]
    catalog: CatalogArgs,
    #[arg(long)]
    out: PathBuf,
    /// IVF clusters (default ceil(sqrt(n)))
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    bloom_bits: u32,
    #[arg(long, default_value_t = 5)]
    bloom_k: u32,
    /// Bit-position recipe: 1 = plain double hashing, 2 = remixed per probe
    #[arg(long, default_value_t = 2)]
    bloom_hash: u32,
    #[arg(long, default_value_t = 1)]
    version: u64,
    #[arg(long, default_value_t = 25)]
    kmeans_iters: usize,
    #[arg(long, default_value_t = 0)]
    kmeans_seed: u64,
    /// Scorer JSON file; overrides --scorer
    #[arg(long)]
    scorer_file: Option<PathBuf>,
    /// dot, mlp or mol (random weights)
    #[arg(long, default_value = "dot")]
    scorer: String,
    /// Task heads for a generated MLP scorer
    #[arg(long, value_delimiter = ',', default_value = "main")]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 7)]
    scorer_seed: u64,
    /// Default value model JSON file
    #[arg(long)]
    value_model: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct SnapArgs {
    /// Snapshot file; repeat for one shard per file
    #[arg(long, required = true)]
    snapshot: Vec<PathBuf>,
}

impl SnapArgs {
    fn load(&self) -> Result<Arc<dyn Backend>, CliError> {
        load_backend(&self.snapshot)
    }
}

#[derive(Args, Clone, Copy)]
struct KnobArgs {
    #[arg(long, default_value_t = 32)]
    nprobe: usize,
    #[arg(long, default_value_t = 1000)]
    k0: usize,
    #[arg(long, default_value_t = 100)]
    topk: usize,
}

impl KnobArgs {
    fn defaults(&self) -> ServeDefaults {
        ServeDefaults {
            nprobe: self.nprobe,
            k0: self.k0,
            topk: self.topk,
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    snap: SnapArgs,
    #[arg(long)]
    port: Option<u16>,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Also serve stdin to stdout
    #[arg(long)]
    stdin: bool,
    #[arg(long, default_value_t = 6)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    batch_timeout_ms: u64,
    #[command(flatten)]
    knobs: KnobArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    snap: SnapArgs,
    /// Catalog the snapshot was built from, for recall and FPR columns
    #[command(flatten)]
    catalog: CatalogArgs,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 1)]
    workload_seed: u64,

    #[arg(long, value_delimiter = ',', default_value = "main")]
    tasks: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    filter_prob: f64,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    nprobe: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    k0: usize,
    #[arg(long, default_value_t = 100)]
    topk: usize,
    #[arg(long, default_value_t = 6)]
    batch: usize,
    #[arg(long, default_value_t = 50)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    timed: usize,
    /// Evaluate filters over every slot instead of only probed clusters
    #[arg(long)]
    no_codesign: bool,
    #[arg(long, default_value = "synth")]
    workload_id: String,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Recall@k of unfiltered IVF search against brute force, per nprobe
    Recall {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long)]
        clusters: Option<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        nprobe: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value_t = 100)]
        queries: usize,
    },
    /// Bloom false positive rate per bit budget, with the theoretical value
    Fpr {
        #[command(flatten)]
        catalog: CatalogArgs,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        bits: Vec<u32>,
        #[arg(long, default_value_t = 5)]
        k: u32,
        #[arg(long, default_value_t = 200)]
        queries: usize,
    },
}

#[derive(Debug)]
struct CliError {
    kind: &'static str,
    message: String,
}

macro_rules! cli_from {
    ($($t:ty => $k:literal),* $(,)?) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError { kind: $k, message: e.to_string() }
            }
        }
    )*};
}

cli_from!(
    io::Error => "io",
    filtra::catalog::CatalogError => "catalog",
    filtra::snapshot::SnapshotError => "snapshot",
    filtra::retrieval::RetrievalError => "retrieval",
    filtra::eval::EvalError => "eval",
    filtra::ivf::IvfError => "index",
    filtra::filter::FilterError => "filter",
    serde_json::Error => "json",
);

fn invalid(message: impl Into<String>) -> CliError {
    CliError { kind: "invalid_argument", message: message.into() }
}

fn load_backend(paths: &[PathBuf]) -> Result<Arc<dyn Backend>, CliError> {
    let engines = paths
        .iter()
        .map(|p| snapshot::load(p))
        .collect::<Result<Vec<_>, _>>()?;
    if engines.len() == 1 {
        return Ok(Arc::new(engines.into_iter().next().unwrap()));
    }
    let version = engines[0].version;
    if engines.iter().any(|e| e.version != version) {
        return Err(invalid("shard snapshots carry different versions"));
    }
    Ok(Arc::new(ShardedEngine::new(engines, version)?))
}

fn build(a: &BuildArgs) -> Result<(), CliError> {
    let catalog = a.catalog.load()?;
    let dim = catalog.dim();
    let overarch = match &a.scorer_file {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => match a.scorer.as_str() {
            "dot" => OverArchModel::dot_product(dim),
            "mlp" => {
                let tasks: Vec<&str> = a.tasks.iter().map(|s| s.as_str()).collect();
                OverArchModel::random_mlp(dim, &[a.hidden], &tasks, true, a.scorer_seed)
            }
            "mol" => OverArchModel::random_mol(dim, 4, a.hidden.min(dim).max(1), a.scorer_seed),
            s => return Err(invalid(format!("unknown scorer {s:?}"))),
        },
    };
    let value_model = match &a.value_model {
        Some(p) => Some(ValueExpr::from_json(&fs::read_to_string(p)?)?),
        None => None,
    };
    let cfg = EngineConfig {
        ivf: IvfConfig {
            n_clusters: a.clusters,
            max_iters: a.kmeans_iters,
            seed: a.kmeans_seed,
            ..Default::default()
        },
        bloom: BloomParams::new(a.bloom_bits, a.bloom_k)?.with_scheme(
            HashScheme::from_id(a.bloom_hash).ok_or_else(|| invalid(format!("unknown bloom hash {}", a.bloom_hash)))?,
        ),
        overarch,
        value_model,
        item_embeddings: None,
        version: a.version,
    };
    let engine = snapshot::publish(&catalog, &cfg, &a.out)?;
    info!(
        "wrote {} ({} items, {} clusters, version {})",
        a.out.display(),
        engine.ivf.n_items(),
        engine.ivf.n_clusters(),
        engine.version
    );
    writeln!(io::stdout(), "{}", serde_json::to_string(&snapshot::describe(&a.out)?)?)?;
    Ok(())
}

fn serve_cmd(a: &ServeArgs) -> Result<(), CliError> {
    if a.port.is_none() && !a.stdin {
        return Err(invalid("serve needs --port and/or --stdin"));
    }
    let handle = Arc::new(EngineHandle::new(a.snap.load()?));
    let cfg = BatchConfig {
        max_batch: a.batch,
        timeout: Duration::from_millis(a.batch_timeout_ms),
        defaults: a.knobs.defaults(),
        ..Default::default()
    };
    let tcp = match a.port {
        Some(port) => {
            let listener = TcpListener::bind((a.host.as_str(), port))?;
            eprintln!("{}", serde_json::json!({"listening": listener.local_addr()?.to_string()}));
            let h = handle.clone();
            Some(thread::spawn(move || serve::serve_tcp(listener, h, cfg, None)))
        }
        None => None,
    };
    if a.stdin {
        serve::serve_stream(&handle, BufReader::new(io::stdin()), io::stdout().lock(), &cfg)?;
        return Ok(());
    }
    if let Some(t) = tcp {
        t.join().map_err(|_| invalid("server thread panicked"))??;
    }
    Ok(())
}

fn query(snap: &SnapArgs, req: &Path, knobs: &KnobArgs) -> Result<(), CliError> {
    let backend = snap.load()?;
    let reader: Box<dyn BufRead> = if req == Path::new("-") {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(fs::File::open(req)?))
    };
    let lines: Vec<String> = reader
        .lines()
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let mut out = io::stdout().lock();
    for r in serve::handle_lines(backend.as_ref(), &lines, &knobs.defaults()) {
        writeln!(out, "{}", r.to_json())?;
    }
    Ok(())
}

/// Rebuilds a feature-less catalog from a snapshot's embedding cache.
fn catalog_from_engine(e: &Engine) -> Result<Catalog, CliError> {
    let items = e
        .cache
        .ids()
        .iter()
        .enumerate()
        .map(|(i, &id)| Item::new(id, vec![], e.cache.data().row(i).to_vec()))
        .collect();
    Ok(Catalog::new(items, e.cache.dim(), Default::default())?)
}

fn bench_cmd(a: &BenchArgs) -> Result<(), CliError> {
    if a.snap.snapshot.len() != 1 {
        return Err(invalid("bench runs against a single snapshot"));
    }
    let engine = snapshot::load(&a.snap.snapshot[0])?;
    let catalog = match &a.catalog {
        c if c.catalog.is_some() || a.filter_prob > 0.0 => Some(c.load()?),
        _ => None,
    };
    let source = match &catalog {
        Some(c) => c.clone(),
        None => catalog_from_engine(&engine)?,
    };
    let workload = eval::synth_workload(
        &source,
        &WorkloadConfig {
            n_queries: a.queries,
            tasks: a.tasks.clone(),
            noise: 0.3,
            filter_prob: a.filter_prob,
            filters: FilterGen { allow_not: false, ..Default::default() },
            seed: a.workload_seed,
        },
    );
    let mut csv = String::from(eval::CSV_HEADER);
    csv.push('\n');
    let mut out = io::stdout().lock();
    for &nprobe in &a.nprobe {
        let cfg = BenchConfig {
            workload_id: a.workload_id.clone(),
            nprobe,
            k0: a.k0,
            topk: a.topk,
            batch_size: a.batch,
            warmup_batches: a.warmup,
            timed_batches: a.timed,
            codesign: !a.no_codesign,
        };
        let report = eval::bench(&engine, &workload, &cfg, catalog.as_ref())?;
        writeln!(out, "{}", serde_json::to_string(&report)?)?;
        csv.push_str(&report.csv_row());
        csv.push('\n');
    }
    if let Some(p) = &a.csv {
        fs::write(p, csv)?;
    }
    Ok(())
}

fn eval_cmd(kind: &EvalCmd) -> Result<(), CliError> {
    let mut out = io::stdout().lock();
    match kind {
        EvalCmd::Recall { catalog, clusters, nprobe, k, queries } => {
            let c = catalog.load()?;
            let ivf = IvfIndex::build(&c, &IvfConfig { n_clusters: *clusters, ..Default::default() })?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(catalog.synth.seed ^ 0x5eed);
            let qs: Vec<Vec<f32>> = (0..*queries).map(|_| eval::query_near_item(&c, &mut rng, 0.3)).collect();
            for p in eval::recall_sweep(&c, &ivf, &qs, nprobe, *k)? {
                writeln!(out, "{}", serde_json::to_string(&p)?)?;
            }
        }
        EvalCmd::Fpr { catalog, bits, k, queries } => {
            let c = catalog.load()?;
            let fi = ForwardIndex::for_catalog(&c);
            let terms = eval::catalog_terms(&c);
            if terms.is_empty() {
                return Err(invalid("catalog has no features"));
            }
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(catalog.synth.seed ^ 0xf9);
            let g = FilterGen { allow_not: false, ..Default::default() };
            let qs: Vec<_> = (0..*queries).map(|_| eval::random_filter(&mut rng, &terms, &g)).collect();
            let avg_terms = c.items().iter().map(|i| i.features.len()).sum::<usize>() as f64 / c.len() as f64;
            for &m in bits {
                let params = BloomParams::new(m, *k)?;
                let bloom = BloomIndex::for_catalog(&c, params);
                let leaves = eval::fpr_measure_leaves(&bloom, &fi, &terms);
                let q = eval::fpr_measure_queries(&bloom, &fi, &qs)?;
                let theory = filtra::filter::bloom_fpr_theoretical(&params, avg_terms.round() as usize);
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "M": m, "K": k, "leaf_fpr": leaves.rate, "query_fpr": q.rate,
                        "theoretical_leaf_fpr": theory, "false_negatives": leaves.false_negatives + q.false_negatives,
                        "plane_bytes": bloom.plane_bytes(),
                    })
                )?;
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.cmd {
        Cmd::Synth { synth, out, format } => {
            let c = synth_catalog(&SynthConfig::new(synth.items, synth.dim, synth.blobs, synth.seed))?;
            save_catalog(&c, out, *format)?;
            Ok(())
        }
        Cmd::Build(a) => build(a),
        Cmd::Serve(a) => serve_cmd(a),
        Cmd::Query { snap, req, knobs } => query(snap, req, knobs),
        Cmd::Bench(a) => bench_cmd(a),
        Cmd::Eval { kind } => eval_cmd(kind),
        Cmd::Describe { snapshot: p } => {
            writeln!(io::stdout(), "{}", serde_json::to_string_pretty(&snapshot::describe(p)?)?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FILTRA_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::json!({"error": {"kind": e.kind, "message": e.message}}));
            ExitCode::from(1)
        }
    }
}
