use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::process::Command;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use filtra::catalog::{synth_catalog, Catalog, SynthConfig};
use filtra::retrieval::{Engine, EngineConfig, OverArchModel};
use filtra::serve::{
    handle_batch, handle_request, serve_tcp, Backend, BatchConfig, EngineHandle, ServeDefaults, WireMode, WireRequest,
    WireResponse, WireTask,
};
use filtra::snapshot;

fn catalog() -> Catalog {
    synth_catalog(&SynthConfig::new(3000, 16, 20, 21)).unwrap()
}

fn engine(cat: &Catalog, version: u64) -> Engine {
    let mut cfg = EngineConfig::new(16);
    cfg.version = version;
    cfg.overarch = OverArchModel::random_mlp(16, &[24], &["like", "share"], false, version);
    Engine::build(cat, &cfg).unwrap()
}

fn request(i: usize, rng: &mut ChaCha8Rng, cat: &Catalog) -> WireRequest {
    let user: Vec<f32> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tasks = ["like", "share"]
        .iter()
        .map(|n| WireTask { name: n.to_string(), user_embedding: user.clone() })
        .collect();
    let esr = i % 2 == 1;
    WireRequest {
        id: format!("r{i}"),
        mode: if esr { WireMode::Esr } else { WireMode::Retrieve },
        tasks,
        filter: (!esr && i.is_multiple_of(4)).then(|| "1 = 3 OR 2 = 7".to_string()),
        nprobe: Some(8),
        k0: Some(200),
        topk: Some(20),
        merge: None,
        item_ids: esr.then(|| (0..300).map(|_| cat.items()[rng.gen_range(0..cat.len())].item_id).collect()),
        value_model: None,
    }
}

fn strip(rs: &[WireResponse]) -> Vec<WireResponse> {
    rs.iter().map(WireResponse::without_timing).collect()
}

#[test]
fn mixed_batch_equals_sequential() {
    let cat = catalog();
    let e = engine(&cat, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let reqs: Vec<WireRequest> = (0..8).map(|i| request(i, &mut rng, &cat)).collect();
    let d = ServeDefaults::default();
    let batch = handle_batch(&e, &reqs, &d);
    let seq: Vec<WireResponse> = reqs.iter().map(|r| handle_request(&e, r, &d)).collect();
    assert!(batch.iter().all(|r| !r.is_error() && !r.items.as_ref().unwrap().is_empty()));
    assert_eq!(strip(&batch), strip(&seq));
}

#[test]
fn swap_five_to_nine_never_mixes() {
    let cat = catalog();
    let dir = tempfile::tempdir().unwrap();
    let (p5, p9) = (dir.path().join("v5.snap"), dir.path().join("v9.snap"));
    snapshot::write_snapshot(&engine(&cat, 5), &p5).unwrap();
    snapshot::write_snapshot(&engine(&cat, 9), &p9).unwrap();
    let v5: Arc<dyn Backend> = Arc::new(snapshot::load(&p5).unwrap());
    let v9: Arc<dyn Backend> = Arc::new(snapshot::load(&p9).unwrap());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let reqs: Vec<WireRequest> = (0..16).map(|i| request(i, &mut rng, &cat)).collect();
    let d = ServeDefaults::default();
    let want5 = strip(&reqs.iter().map(|r| handle_request(&*v5, r, &d)).collect::<Vec<_>>());
    let want9 = strip(&reqs.iter().map(|r| handle_request(&*v9, r, &d)).collect::<Vec<_>>());
    assert_ne!(want5, want9);

    let handle = Arc::new(EngineHandle::new(v5));
    let done = Arc::new(AtomicBool::new(false));
    let readers: Vec<_> = (0..2)
        .map(|t| {
            let (handle, done, reqs) = (handle.clone(), done.clone(), reqs.clone());
            let (want5, want9) = (want5.clone(), want9.clone());
            thread::spawn(move || {
                let mut seen = [0usize; 2];
                let mut i = t;
                while !done.load(Ordering::Acquire) || seen[1] == 0 {
                    let backend = handle.load();
                    let got = handle_request(&*backend, &reqs[i % reqs.len()], &d).without_timing();
                    match got.snapshot_version {
                        5 => assert_eq!(got, want5[i % reqs.len()]),
                        9 => assert_eq!(got, want9[i % reqs.len()]),
                        v => panic!("unexpected version {v}"),
                    }
                    seen[(got.snapshot_version == 9) as usize] += 1;
                    i += 1;
                }
                seen
            })
        })
        .collect();
    thread::sleep(std::time::Duration::from_millis(50));
    let old = handle.swap(v9);
    assert_eq!(old.version(), 5);
    assert_eq!(handle.version(), 9);
    done.store(true, Ordering::Release);
    for r in readers {
        let seen = r.join().unwrap();
        assert!(seen[1] > 0);
    }
}

#[test]
fn tcp_round_trip() {
    let cat = catalog();
    let e: Arc<dyn Backend> = Arc::new(engine(&cat, 3));
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let handle = Arc::new(EngineHandle::new(e.clone()));
    let server = thread::spawn(move || serve_tcp(listener, handle, BatchConfig::default(), Some(1)));

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reqs: Vec<WireRequest> = (0..10).map(|i| request(i, &mut rng, &cat)).collect();
    let mut stream = TcpStream::connect(addr).unwrap();
    for r in &reqs {
        writeln!(stream, "{}", serde_json::to_string(r).unwrap()).unwrap();
    }
    writeln!(stream, "{{not json").unwrap();
    stream.shutdown(std::net::Shutdown::Write).unwrap();
    let lines: Vec<String> = BufReader::new(stream).lines().map(Result::unwrap).collect();
    server.join().unwrap().unwrap();

    assert_eq!(lines.len(), reqs.len() + 1);
    let d = ServeDefaults::default();
    for (line, r) in lines.iter().zip(&reqs) {
        let got: WireResponse = serde_json::from_str(line).unwrap();
        assert_eq!(got.without_timing(), handle_request(&*e, r, &d).without_timing());
    }
    let bad: WireResponse = serde_json::from_str(lines.last().unwrap()).unwrap();
    assert!(bad.is_error());
}

#[test]
fn cli_build_describe_query() {
    let bin = env!("CARGO_BIN_EXE_filtra");
    let dir = tempfile::tempdir().unwrap();
    let snap = dir.path().join("s.snap");
    let out = Command::new(bin)
        .args(["build", "--items", "1500", "--dim", "8", "--blobs", "10", "--version", "4", "--out"])
        .arg(&snap)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = Command::new(bin).args(["describe", "--snapshot"]).arg(&snap).output().unwrap();
    assert!(out.status.success());
    let desc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(desc["snapshot_version"], 4);
    assert_eq!(desc["n_items"], 1500);
    assert_eq!(desc["hash_scheme_id"], 2);
    assert_eq!(desc["sections"].as_array().unwrap().len(), 11);

    let req = dir.path().join("req.jsonl");
    let user = vec![0.3f32; 8];
    let lines = [
        serde_json::json!({"id": "a", "tasks": [{"name": "main", "user_embedding": user}], "topk": 5}),
        serde_json::json!({"id": "b", "tasks": [{"name": "main", "user_embedding": user}], "topk": 5, "filter": "1 = 3 OR 2 = 7"}),
        serde_json::json!({"id": "c", "tasks": [{"name": "main", "user_embedding": [1.0]}]}),
    ];
    std::fs::write(&req, lines.iter().map(|l| l.to_string() + "\n").collect::<String>()).unwrap();
    let out = Command::new(bin).args(["query", "--snapshot"]).arg(&snap).arg("--req").arg(&req).output().unwrap();
    assert!(out.status.success());
    let resps: Vec<WireResponse> = String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(resps.len(), 3);
    assert_eq!(resps[0].items.as_ref().unwrap().len(), 5);
    assert!(resps[1].items.is_some());
    assert!(resps[2].is_error());
    assert!(resps.iter().all(|r| r.snapshot_version == 4));

    let out = Command::new(bin).args(["describe", "--snapshot"]).arg(dir.path().join("missing")).output().unwrap();
    assert!(!out.status.success());
    let out = Command::new(bin)
        .args(["build", "--items", "100", "--blobs", "4", "--bloom-hash", "9", "--out"])
        .arg(dir.path().join("x.snap"))
        .output()
        .unwrap();
    assert!(!out.status.success());
}
