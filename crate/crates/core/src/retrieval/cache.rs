//! Item embedding cache filled at publish time.

use std::collections::HashMap;

use crate::catalog::Catalog;
use crate::linalg::Matrix;

use super::RetrievalError;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    ids: Vec<u64>,
    index: HashMap<u64, u32>,
    data: Matrix,
}

impl EmbeddingCache {
    /// `ids[i]` maps to row `i` of `data`.
    pub fn new(ids: Vec<u64>, data: Matrix) -> Result<Self, RetrievalError> {
        if ids.len() != data.rows() {
            return Err(RetrievalError::Model(format!(
                "cache has {} ids for {} rows",
                ids.len(),
                data.rows()
            )));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, &id) in ids.iter().enumerate() {
            if index.insert(id, i as u32).is_some() {
                return Err(RetrievalError::Model(format!("duplicate cache id {id}")));
            }
        }
        Ok(Self { ids, index, data })
    }

    /// Caches the catalog embeddings themselves.
    pub fn from_catalog(catalog: &Catalog) -> Self {
        let ids = catalog.items().iter().map(|it| it.item_id).collect();
        Self::new(ids, catalog.embeddings()).expect("catalog ids are unique")
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn data(&self) -> &Matrix {
        &self.data
    }

    pub fn get(&self, id: u64) -> Option<&[f32]> {
        self.index.get(&id).map(|&r| self.data.row(r as usize))
    }

    pub fn lookup(&self, id: u64) -> Result<&[f32], RetrievalError> {
        self.get(id).ok_or(RetrievalError::MissingItem(id))
    }

    pub fn lookup_batch(&self, ids: &[u64]) -> Result<Vec<&[f32]>, RetrievalError> {
        ids.iter().map(|&id| self.lookup(id)).collect()
    }
}
