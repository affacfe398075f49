//! Feature filtering.
//!
//! - [`bloom`]: transposed bloom-signature planes, the serving path.
//! - [`expr`]: boolean filter expressions and their text grammar.
//! - [`compile`]: postfix compilation and the bit-mask stack machine.
//! - [`forward`] and [`inverted`]: exact baselines, also used as oracles.
//!
//! Bloom evaluation never misses a true match of a NOT-free query; it may
//! admit false positives. Under NOT, the complement of a false positive is a
//! false negative, so NOT queries are excluded from FPR measurement.

pub mod bloom;
pub mod compile;
pub mod expr;
pub mod forward;
pub mod inverted;

use thiserror::Error;

pub use bloom::{
    bloom_eval_leaf, bloom_fpr_theoretical, hash_positions, suggested_bits, BloomIndex, BloomParams, HashScheme,
    QueryBloom,
};
pub use compile::{
    compile_filter, eval_compiled, eval_compiled_into, eval_words, CompiledFilter, CompiledLeaf, EvalScratch, EvalStats, FilterOp,
};
pub use expr::{parse_filter, FilterExpr};
pub use forward::{forward_eval, ForwardIndex};
pub use inverted::{inverted_eval, InvertedIndex};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("syntax error at byte {position}: {msg}")]
    Syntax { position: usize, msg: String },
    #[error("unknown feature {0:?}")]
    UnknownFeature(String),
    #[error("unknown value {value:?} for feature {feature:?}")]
    UnknownValue { feature: String, value: String },
    #[error("invalid bloom parameters: {0}")]
    InvalidParams(String),
}

impl FilterError {
    pub(crate) fn syntax(position: usize, msg: &str) -> Self {
        Self::Syntax {
            position,
            msg: msg.to_string(),
        }
    }
}
