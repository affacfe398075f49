//! The retrieval pipeline: filtered candidate generation per task, merge,
//! OverArch re-ranking, and value-model aggregation.

pub mod cache;
pub mod overarch;
pub mod pipeline;
pub mod value_model;

use thiserror::Error;

use crate::filter::FilterError;
use crate::ivf::IvfError;

pub use cache::EmbeddingCache;
pub use overarch::{Dense, MlpScorer, MolScorer, OverArchModel};
pub use pipeline::{
    codesigned_search, esr_rank, merge_candidates, rank_candidates, retrieve, CandidateLookup, Engine, EngineConfig, MergePolicy,
    RankedItem, RetrievalRequest, RetrievalResponse, SearchScratch, SearchStats, StageStats, TaskQuery,
};
pub use value_model::{BoundValueModel, Cmp, Cond, ValueExpr};

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("item {0} is not in the embedding cache")]
    MissingItem(u64),
    #[error("division by zero in value model")]
    DivByZero,
    #[error("invalid value model: {0}")]
    ValueModel(String),
    #[error("invalid scorer: {0}")]
    Model(String),
    #[error(transparent)]
    Ivf(#[from] IvfError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}
