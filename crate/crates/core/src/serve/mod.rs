//! Request serving: the NDJSON wire format, batch handling, hot-swappable
//! engine handles, in-process sharding, and the stream/TCP server loop.

pub mod handle;
pub mod server;
pub mod shard;
pub mod wire;

use crate::filter::FilterExpr;
use crate::retrieval::{Engine, RetrievalError, RetrievalRequest, RetrievalResponse, TaskQuery, ValueExpr};

pub use handle::EngineHandle;
pub use server::{serve_stream, serve_tcp, BatchConfig};
pub use shard::{partition_catalog, ShardedEngine};
pub use wire::{
    handle_batch, handle_line, handle_lines, handle_request, ServeDefaults, WireError, WireItem, WireMode, WireRequest,
    WireResponse, WireStats, WireTask,
};

/// Anything that can answer retrieval and ranking requests.
pub trait Backend: Send + Sync {
    fn version(&self) -> u64;
    fn dim(&self) -> usize;
    fn parse_filter(&self, text: &str) -> Result<FilterExpr, RetrievalError>;
    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse, RetrievalError>;
    fn esr(
        &self,
        tasks: &[TaskQuery],
        item_ids: &[u64],
        topk: usize,
        vm: Option<&ValueExpr>,
    ) -> Result<RetrievalResponse, RetrievalError>;
}

impl Backend for Engine {
    fn version(&self) -> u64 {
        self.version
    }

    fn dim(&self) -> usize {
        Engine::dim(self)
    }

    fn parse_filter(&self, text: &str) -> Result<FilterExpr, RetrievalError> {
        Engine::parse_filter(self, text)
    }

    fn retrieve(&self, req: &RetrievalRequest) -> Result<RetrievalResponse, RetrievalError> {
        Engine::retrieve(self, req)
    }

    fn esr(
        &self,
        tasks: &[TaskQuery],
        item_ids: &[u64],
        topk: usize,
        vm: Option<&ValueExpr>,
    ) -> Result<RetrievalResponse, RetrievalError> {
        Engine::esr(self, tasks, item_ids, topk, vm)
    }
}
