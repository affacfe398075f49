//! JSON request/response objects and batch handling.
//!
//! Request:
//!
//! ```json
//! {"id": "r1", "mode": "retrieve",
//!  "tasks": [{"name": "like", "user_embedding": [0.1, 0.2]}],
//!  "filter": "category = \"shoes\" OR brand = 7",
//!  "nprobe": 32, "k0": 1000, "topk": 100, "merge": "union"}
//! ```
//!
//! `mode` is `retrieve` (default) or `esr`; `esr` ranks the given
//! `item_ids` instead of searching. `value_model` optionally overrides the
//! engine's value model.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::retrieval::{MergePolicy, RetrievalError, RetrievalRequest, RetrievalResponse, TaskQuery, ValueExpr};

use super::Backend;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireMode {
    #[default]
    Retrieve,
    Esr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTask {
    pub name: String,
    pub user_embedding: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireRequest {
    pub id: String,
    #[serde(default)]
    pub mode: WireMode,
    pub tasks: Vec<WireTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filter: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nprobe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k0: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topk: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub merge: Option<MergePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub item_ids: Option<Vec<u64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_model: Option<ValueExpr>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireItem {
    pub item_id: u64,
    pub score: f64,
    pub task_scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct WireStats {
    pub probe_us: f64,
    pub filter_us: f64,
    pub scan_us: f64,
    pub overarch_us: f64,
    pub total_us: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub kind: String,
    pub message: String,
}

impl WireError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_string(),
            message: message.into(),
        }
    }

    fn from_retrieval(e: &RetrievalError) -> Self {
        let kind = match e {
            RetrievalError::InvalidRequest(_) => "invalid_request",
            RetrievalError::UnknownTask(_) => "unknown_task",
            RetrievalError::MissingItem(_) => "missing_item",
            RetrievalError::DivByZero => "div_by_zero",
            RetrievalError::ValueModel(_) => "value_model",
            RetrievalError::Model(_) => "model",
            RetrievalError::Ivf(_) => "index",
            RetrievalError::Filter(_) => "filter",
        };
        Self::new(kind, e.to_string())
    }
}

/// Either `items` + `stats` or `error` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub id: String,
    pub snapshot_version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub items: Option<Vec<WireItem>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<WireStats>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
}

impl WireResponse {
    fn error(id: String, version: u64, e: WireError) -> Self {
        Self {
            id,
            snapshot_version: version,
            items: None,
            stats: None,
            error: Some(e),
        }
    }

    /// The response with timing stats removed, for comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            stats: None,
            ..self.clone()
        }
    }

    pub fn is_error(&self) -> bool {
        self.error.is_some()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Values used when a request leaves a knob out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServeDefaults {
    pub nprobe: usize,
    pub k0: usize,
    pub topk: usize,
}

impl Default for ServeDefaults {
    fn default() -> Self {
        Self {
            nprobe: 32,
            k0: 1000,
            topk: 100,
        }
    }
}

fn to_wire(resp: RetrievalResponse) -> (Vec<WireItem>, WireStats) {
    let items = resp
        .items
        .into_iter()
        .map(|it| WireItem {
            item_id: it.item_id,
            score: it.score,
            task_scores: resp.task_names.iter().cloned().zip(it.task_scores).collect(),
        })
        .collect();
    let s = resp.stats;
    let stats = WireStats {
        probe_us: s.probe_us,
        filter_us: s.filter_us,
        scan_us: s.scan_us,
        overarch_us: s.overarch_us,
        total_us: s.total_us,
    };
    (items, stats)
}

fn run(backend: &dyn Backend, req: &WireRequest, d: &ServeDefaults) -> Result<RetrievalResponse, RetrievalError> {
    let tasks: Vec<TaskQuery> = req
        .tasks
        .iter()
        .map(|t| TaskQuery {
            name: t.name.clone(),
            user_embedding: t.user_embedding.clone(),
        })
        .collect();
    match req.mode {
        WireMode::Retrieve => {
            if req.item_ids.is_some() {
                return Err(RetrievalError::InvalidRequest("item_ids is only valid in esr mode".into()));
            }
            let topk = req.topk.unwrap_or(d.topk);
            let filter = req.filter.as_deref().map(|f| backend.parse_filter(f)).transpose()?;
            backend.retrieve(&RetrievalRequest {
                tasks,
                filter,
                nprobe: req.nprobe.unwrap_or(d.nprobe),
                k0: req.k0.unwrap_or(d.k0.max(topk)),
                topk,
                merge: req.merge.unwrap_or_default(),
                value_model: req.value_model.clone(),
            })
        }
        WireMode::Esr => {
            let ids = req
                .item_ids
                .as_ref()
                .ok_or_else(|| RetrievalError::InvalidRequest("esr mode needs item_ids".into()))?;
            if req.filter.is_some() {
                return Err(RetrievalError::InvalidRequest("filter is not supported in esr mode".into()));
            }
            backend.esr(&tasks, ids, req.topk.unwrap_or(ids.len().max(1)), req.value_model.as_ref())
        }
    }
}

pub fn handle_request(backend: &dyn Backend, req: &WireRequest, d: &ServeDefaults) -> WireResponse {
    let start = Instant::now();
    match run(backend, req, d) {
        Ok(resp) => {
            let (items, mut stats) = to_wire(resp);
            stats.total_us = start.elapsed().as_secs_f64() * 1e6;
            WireResponse {
                id: req.id.clone(),
                snapshot_version: backend.version(),
                items: Some(items),
                stats: Some(stats),
                error: None,
            }
        }
        Err(e) => WireResponse::error(req.id.clone(), backend.version(), WireError::from_retrieval(&e)),
    }
}

/// Answers every request against the same backend; output order matches
/// input order and equals handling each request alone.
pub fn handle_batch(backend: &dyn Backend, reqs: &[WireRequest], d: &ServeDefaults) -> Vec<WireResponse> {
    reqs.par_iter().with_max_len(1).map(|r| handle_request(backend, r, d)).collect()
}

/// Parses and answers one NDJSON line. Undecodable lines produce a `parse`
/// error carrying the `id` field when one can be recovered.
pub fn handle_line(backend: &dyn Backend, line: &str, d: &ServeDefaults) -> WireResponse {
    match serde_json::from_str::<WireRequest>(line) {
        Ok(req) => handle_request(backend, &req, d),
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string))
                .unwrap_or_default();
            WireResponse::error(id, backend.version(), WireError::new("parse", e.to_string()))
        }
    }
}

pub fn handle_lines<S: AsRef<str> + Sync>(backend: &dyn Backend, lines: &[S], d: &ServeDefaults) -> Vec<WireResponse> {
    lines
        .par_iter()
        .with_max_len(1)
        .map(|l| handle_line(backend, l.as_ref(), d))
        .collect()
}
