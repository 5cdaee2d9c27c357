//! Node-level caching proxy in front of the object store.
//!
//! Objects are content-addressed, so a cached entry can never be stale. The
//! cache is LRU with a byte cap; population is single-flight per content id,
//! so N concurrent misses on one id cost one backing fetch.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use lru::LruCache;
use tokio::sync::Mutex as AsyncMutex;

use super::{BlobAccess, BlobBackend, BlobError, BlobRef, ContentId};

struct CacheEntry {
    bytes: Arc<Vec<u8>>,
    #[allow(dead_code)]
    last_access: Instant,
}

struct Cache {
    entries: LruCache<ContentId, CacheEntry>,
    bytes: u64,
    cap: u64,
}

impl Cache {
    fn get(&mut self, id: &ContentId) -> Option<Arc<Vec<u8>>> {
        let entry = self.entries.get_mut(id)?;
        entry.last_access = Instant::now();
        Some(entry.bytes.clone())
    }

    fn insert(&mut self, id: ContentId, bytes: Arc<Vec<u8>>) {
        let len = bytes.len() as u64;
        if len > self.cap {
            return;
        }
        if let Some(old) = self.entries.put(id, CacheEntry { bytes, last_access: Instant::now() }) {
            self.bytes -= old.bytes.len() as u64;
        }
        self.bytes += len;
        while self.bytes > self.cap {
            match self.entries.pop_lru() {
                Some((_, evicted)) => self.bytes -= evicted.bytes.len() as u64,
                None => break,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ProxyStats {
    pub hits: u64,
    pub misses: u64,
    pub backing_fetches: u64,
    pub cached_bytes: u64,
}

pub struct BlobProxy {
    backing: Arc<dyn BlobBackend>,
    cache: Mutex<Cache>,
    inflight: Mutex<HashMap<ContentId, Arc<AsyncMutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    backing_fetches: AtomicU64,
}

impl BlobProxy {
    pub const DEFAULT_CAP_BYTES: u64 = 256 * 1024 * 1024;

    pub fn new(backing: Arc<dyn BlobBackend>, cap_bytes: u64) -> Self {
        BlobProxy {
            backing,
            cache: Mutex::new(Cache { entries: LruCache::unbounded(), bytes: 0, cap: cap_bytes }),
            inflight: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            backing_fetches: AtomicU64::new(0),
        }
    }

    pub fn stats(&self) -> ProxyStats {
        ProxyStats {
            hits: self.hits.load(Ordering::SeqCst),
            misses: self.misses.load(Ordering::SeqCst),
            backing_fetches: self.backing_fetches.load(Ordering::SeqCst),
            cached_bytes: self.cache.lock().unwrap().bytes,
        }
    }

    pub async fn get_by_id(&self, id: &ContentId) -> Result<Arc<Vec<u8>>, BlobError> {
        if let Some(bytes) = self.cache.lock().unwrap().get(id) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(bytes);
        }
        let gate = {
            let mut inflight = self.inflight.lock().unwrap();
            inflight.entry(*id).or_insert_with(|| Arc::new(AsyncMutex::new(()))).clone()
        };
        let _guard = gate.lock().await;
        // Another caller may have populated the cache while we waited.
        if let Some(bytes) = self.cache.lock().unwrap().get(id) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(bytes);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        self.backing_fetches.fetch_add(1, Ordering::SeqCst);
        let out = self.backing.fetch(id).and_then(|bytes| {
            // The backing store verifies on read; verify again so a remote
            // backing cannot poison the cache.
            let actual = ContentId::of(&bytes);
            if actual != *id {
                return Err(BlobError::Integrity { id: *id, actual });
            }
            let bytes = Arc::new(bytes);
            self.cache.lock().unwrap().insert(*id, bytes.clone());
            Ok(bytes)
        });
        self.inflight.lock().unwrap().remove(id);
        out
    }

    pub fn put_bytes(&self, bytes: &[u8]) -> Result<ContentId, BlobError> {
        self.backing.store(bytes)
    }
}

#[async_trait::async_trait]
impl BlobAccess for BlobProxy {
    async fn get(&self, r: &BlobRef) -> Result<Vec<u8>, BlobError> {
        Ok(self.get_by_id(&r.id).await?.as_ref().clone())
    }

    async fn put(&self, bytes: Vec<u8>, media_hint: Option<String>) -> Result<BlobRef, BlobError> {
        let id = self.backing.store(&bytes)?;
        Ok(BlobRef { id, size: bytes.len() as u64, media_hint })
    }
}
