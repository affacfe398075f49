pub mod bitmask;
pub mod catalog;
pub mod codec;
pub mod eval;
pub mod filter;
pub mod hash;
pub mod ivf;
pub mod kmeans;
pub mod linalg;
pub mod quantize;
pub mod retrieval;
pub mod serve;
pub mod snapshot;
pub mod topk;
