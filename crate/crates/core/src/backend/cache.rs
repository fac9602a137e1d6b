use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use lru::LruCache;

use super::{BackendDescriptor, BackendError, ContextQuery, ModelBackend};
use crate::distribution::{ProbDist, TokenId};

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

/// Memoizes `next_token_distribution` in a bounded LRU cache.
///
/// Responses are bit-identical to the wrapped backend; eviction only costs
/// a repeated underlying call. Errors are never cached.
pub struct CachedBackend<B> {
    inner: B,
    cache: Mutex<LruCache<ContextQuery, Arc<ProbDist>>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

pub fn cached<B: ModelBackend>(backend: B, capacity: usize) -> CachedBackend<B> {
    CachedBackend::new(backend, capacity)
}

impl<B: ModelBackend> CachedBackend<B> {
    pub fn new(inner: B, capacity: usize) -> Self {
        let capacity = NonZeroUsize::new(capacity).unwrap_or(NonZeroUsize::MIN);
        Self {
            inner,
            cache: Mutex::new(LruCache::new(capacity)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LruCache<ContextQuery, Arc<ProbDist>>> {
        // A panic while holding the lock cannot leave the LRU half-updated in
        // a way that matters for correctness, so recover from poisoning.
        self.cache.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl<B: ModelBackend> ModelBackend for CachedBackend<B> {
    fn descriptor(&self) -> &BackendDescriptor {
        self.inner.descriptor()
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.inner.tokenize(text)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String, BackendError> {
        self.inner.detokenize(tokens)
    }

    fn next_token_distribution(&self, query: &ContextQuery) -> Result<ProbDist, BackendError> {
        if let Some(hit) = self.lock().get(query).cloned() {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok((*hit).clone());
        }
        // The lock is not held across the backend call; two threads missing
        // on the same query both compute it, which is harmless.
        self.misses.fetch_add(1, Ordering::Relaxed);
        let dist = self.inner.next_token_distribution(query)?;
        self.lock().put(query.clone(), Arc::new(dist.clone()));
        Ok(dist)
    }
}
