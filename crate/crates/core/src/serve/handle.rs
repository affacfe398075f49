//! Hot-swappable engine reference.
//!
//! Readers clone the current `Arc` and run their whole request against it.
//! A swap replaces the pointer; requests already holding the old engine
//! finish on it and the old engine is dropped with its last reference.

use std::sync::{Arc, RwLock};

use super::Backend;

pub struct EngineHandle {
    current: RwLock<Arc<dyn Backend>>,
}

impl EngineHandle {
    pub fn new(backend: Arc<dyn Backend>) -> Self {
        Self {
            current: RwLock::new(backend),
        }
    }

    pub fn load(&self) -> Arc<dyn Backend> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Installs `next` and returns the engine it replaced.
    pub fn swap(&self, next: Arc<dyn Backend>) -> Arc<dyn Backend> {
        let mut guard = self.current.write().unwrap_or_else(|e| e.into_inner());
        std::mem::replace(&mut *guard, next)
    }

    pub fn version(&self) -> u64 {
        self.load().version()
    }
}
