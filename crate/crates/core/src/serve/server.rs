//! NDJSON serving loop with size-or-timeout batching.
//!
//! An ingest thread reads request lines into a bounded queue. The batcher
//! takes the first waiting line, then keeps collecting until it has
//! `max_batch` lines or `timeout` has passed since the first one, and
//! answers the batch against one engine reference. Responses are written in
//! arrival order, one JSON object per line.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, RecvTimeoutError};
use log::{debug, info, warn};

use super::handle::EngineHandle;
use super::wire::{handle_lines, ServeDefaults};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchConfig {
    pub max_batch: usize,
    pub timeout: Duration,
    pub queue: usize,
    pub defaults: ServeDefaults,
}

impl Default for BatchConfig {
    fn default() -> Self {
        Self {
            max_batch: 6,
            timeout: Duration::from_millis(10),
            queue: 1024,
            defaults: ServeDefaults::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ServeCounters {
    pub requests: usize,
    pub batches: usize,
}

/// Serves every line of `reader` until end of input.
pub fn serve_stream<R, W>(handle: &EngineHandle, reader: R, mut writer: W, cfg: &BatchConfig) -> io::Result<ServeCounters>
where
    R: BufRead + Send,
    W: Write,
{
    let max_batch = cfg.max_batch.max(1);
    let (tx, rx) = bounded::<String>(cfg.queue.max(1));
    let mut counters = ServeCounters::default();
    thread::scope(|scope| {
        let ingest = scope.spawn(move || -> io::Result<()> {
            for line in reader.lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                if tx.send(line).is_err() {
                    break;
                }
            }
            Ok(())
        });
        let mut batch = Vec::with_capacity(max_batch);
        while let Ok(first) = rx.recv() {
            batch.push(first);
            let deadline = Instant::now() + cfg.timeout;
            while batch.len() < max_batch {
                match rx.recv_deadline(deadline) {
                    Ok(l) => batch.push(l),
                    Err(RecvTimeoutError::Timeout | RecvTimeoutError::Disconnected) => break,
                }
            }
            let engine = handle.load();
            let responses = handle_lines(engine.as_ref(), &batch, &cfg.defaults);
            debug!("batch of {} on snapshot {}", batch.len(), engine.version());
            for r in &responses {
                writeln!(writer, "{}", r.to_json())?;
            }
            writer.flush()?;
            counters.requests += batch.len();
            counters.batches += 1;
            batch.clear();
        }
        ingest.join().expect("ingest thread panicked")
    })?;
    Ok(counters)
}

fn serve_connection(handle: &EngineHandle, stream: TcpStream, cfg: &BatchConfig) -> io::Result<ServeCounters> {
    let reader = BufReader::new(stream.try_clone()?);
    serve_stream(handle, reader, io::BufWriter::new(stream), cfg)
}

/// Accepts connections on `listener`, one serving loop per connection.
/// Stops after `max_connections` connections when given.
pub fn serve_tcp(
    listener: TcpListener,
    handle: Arc<EngineHandle>,
    cfg: BatchConfig,
    max_connections: Option<usize>,
) -> io::Result<()> {
    info!("listening on {}", listener.local_addr()?);
    let mut workers = Vec::new();
    for (n, stream) in listener.incoming().enumerate() {
        let stream = stream?;
        let handle = handle.clone();
        workers.push(thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            match serve_connection(&handle, stream, &cfg) {
                Ok(c) => debug!("{peer:?}: {} requests in {} batches", c.requests, c.batches),
                Err(e) => warn!("{peer:?}: {e}"),
            }
        }));
        if max_connections.is_some_and(|m| n + 1 >= m) {
            break;
        }
    }
    for w in workers {
        let _ = w.join();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{synth_catalog, SynthConfig};
    use crate::retrieval::{Engine, EngineConfig};
    use crate::serve::WireResponse;

    fn handle() -> EngineHandle {
        let c = synth_catalog(&SynthConfig::new(300, 4, 3, 1)).unwrap();
        EngineHandle::new(Arc::new(Engine::build(&c, &EngineConfig::new(4)).unwrap()))
    }

    #[test]
    fn stream_answers_in_order() {
        let h = handle();
        let mut input = String::new();
        for i in 0..13 {
            input.push_str(&format!(
                "{{\"id\":\"r{i}\",\"tasks\":[{{\"name\":\"t\",\"user_embedding\":[0.5,0.5,0.5,0.5]}}],\"topk\":3}}\n"
            ));
        }
        input.push_str("garbage\n");
        let mut out = Vec::new();
        let cfg = BatchConfig { timeout: Duration::from_millis(50), ..Default::default() };
        let c = serve_stream(&h, input.as_bytes(), &mut out, &cfg).unwrap();
        assert_eq!(c.requests, 14);
        let lines: Vec<WireResponse> = String::from_utf8(out)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 14);
        for (i, r) in lines[..13].iter().enumerate() {
            assert_eq!(r.id, format!("r{i}"));
            assert_eq!(r.items.as_ref().unwrap().len(), 3);
        }
        assert!(lines[13].is_error());
    }
}
