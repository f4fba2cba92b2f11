//! Disk-backed download cache.
//!
//! Response bodies live as raw files under `<cache_dir>/objects/`, named by
//! the hex SHA-256 of their cache key. Reads go through the OS page cache; the
//! only in-memory state is the index of sizes, store times and last-access
//! times, which is rebuilt from a directory scan at startup.
//!
//! Capacity is enforced lazily: [`CacheStore::enforce_capacity`] is called at
//! the start of each request and evicts least-recently-used entries until the
//! store fits. Writes made afterwards may overshoot until the next call.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::hex_digest;
use crate::metrics::CacheMetrics;
use crate::time::Timestamp;

const TMP_PREFIX: &str = ".tmp-";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("failed to write cache object for `{key}`: {source}")]
    DiskWriteFailed { key: String, source: io::Error },
}

#[derive(Debug, PartialEq, Eq)]
pub enum Lookup {
    Hit(Vec<u8>),
    Expired,
    Miss,
}

/// Index metadata for one cached object.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedEntry {
    /// `None` for entries rediscovered on disk whose key has not been seen
    /// since startup.
    pub key: Option<String>,
    pub file_path: PathBuf,
    pub size_bytes: u64,
    pub stored_at: Timestamp,
    /// `None` when unknown; such entries are always treated as expired.
    pub ttl: Option<Duration>,
    pub last_access: Timestamp,
}

impl CachedEntry {
    pub fn is_expired(&self, now: Timestamp) -> bool {
        match self.ttl {
            Some(ttl) => now.saturating_since(self.stored_at) > ttl,
            None => true,
        }
    }
}

type LruKey = (Timestamp, String, String);

#[derive(Default)]
struct Index {
    entries: HashMap<String, CachedEntry>,
    /// (last_access, sort key, digest); sort key is the cache key, or the
    /// digest when the key is unknown.
    lru: BTreeSet<LruKey>,
    used_bytes: u64,
}

impl Index {
    fn lru_key(digest: &str, e: &CachedEntry) -> LruKey {
        (
            e.last_access,
            e.key.clone().unwrap_or_else(|| digest.to_string()),
            digest.to_string(),
        )
    }

    fn insert(&mut self, digest: String, entry: CachedEntry) {
        self.remove(&digest);
        self.used_bytes += entry.size_bytes;
        self.lru.insert(Self::lru_key(&digest, &entry));
        self.entries.insert(digest, entry);
    }

    fn remove(&mut self, digest: &str) -> Option<CachedEntry> {
        let old = self.entries.remove(digest)?;
        self.lru.remove(&Self::lru_key(digest, &old));
        self.used_bytes -= old.size_bytes;
        Some(old)
    }

    fn update(&mut self, digest: &str, f: impl FnOnce(&mut CachedEntry)) {
        if let Some(e) = self.entries.get_mut(digest) {
            self.lru.remove(&Self::lru_key(digest, e));
            f(e);
            self.lru.insert(Self::lru_key(digest, e));
        }
    }
}

pub struct CacheStore {
    objects_dir: PathBuf,
    index: Mutex<Index>,
    metrics: CacheMetrics,
    in_flight: Mutex<HashSet<String>>,
    flight_done: Condvar,
    tmp_seq: AtomicU64,
}

/// Held while refreshing one key; other workers asking for the same key block
/// in [`CacheStore::begin_refresh`] until it is dropped.
pub struct RefreshGuard<'a> {
    store: &'a CacheStore,
    key: String,
}

impl Drop for RefreshGuard<'_> {
    fn drop(&mut self) {
        let mut set = self.store.in_flight.lock().unwrap();
        set.remove(&self.key);
        self.store.flight_done.notify_all();
    }
}

impl CacheStore {
    /// Opens the store under `cache_dir`, rebuilding the index from disk.
    pub fn open(cache_dir: &Path) -> io::Result<Self> {
        let objects_dir = cache_dir.join("objects");
        fs::create_dir_all(&objects_dir)?;
        let mut index = Index::default();
        for dirent in fs::read_dir(&objects_dir)? {
            let dirent = dirent?;
            let name = dirent.file_name().to_string_lossy().into_owned();
            if name.starts_with(TMP_PREFIX) {
                let _ = fs::remove_file(dirent.path());
                continue;
            }
            let meta = dirent.metadata()?;
            if !meta.is_file() || name.len() != 64 || !name.bytes().all(|b| b.is_ascii_hexdigit()) {
                continue;
            }
            let mtime = meta.modified().map(Timestamp::from).unwrap_or_default();
            index.insert(
                name,
                CachedEntry {
                    key: None,
                    file_path: dirent.path(),
                    size_bytes: meta.len(),
                    stored_at: mtime,
                    ttl: None,
                    last_access: mtime,
                },
            );
        }
        Ok(CacheStore {
            objects_dir,
            index: Mutex::new(index),
            metrics: CacheMetrics::default(),
            in_flight: Mutex::new(HashSet::new()),
            flight_done: Condvar::new(),
            tmp_seq: AtomicU64::new(0),
        })
    }

    pub fn metrics(&self) -> &CacheMetrics {
        &self.metrics
    }

    pub fn object_path(&self, key: &str) -> PathBuf {
        self.objects_dir.join(hex_digest(key))
    }

    pub fn lookup(&self, key: &str, now: Timestamp) -> Lookup {
        let digest = hex_digest(key);
        let path = {
            let mut index = self.index.lock().unwrap();
            let Some(entry) = index.entries.get(&digest) else {
                self.metrics.misses.inc();
                return Lookup::Miss;
            };
            if entry.key.is_none() {
                index.update(&digest, |e| e.key = Some(key.to_string()));
            }
            let entry = &index.entries[&digest];
            if entry.is_expired(now) {
                self.metrics.expired_refreshes.inc();
                return Lookup::Expired;
            }
            let path = entry.file_path.clone();
            index.update(&digest, |e| e.last_access = now);
            path
        };
        match fs::read(&path) {
            Ok(bytes) => {
                self.metrics.hits.inc();
                self.metrics.bytes_from_cache.add(bytes.len() as u64);
                Lookup::Hit(bytes)
            }
            Err(e) => {
                log::warn!("cache object for `{key}` vanished: {e}");
                let mut index = self.index.lock().unwrap();
                if index.entries.get(&digest).is_some_and(|en| en.file_path == path && !path.exists()) {
                    index.remove(&digest);
                }
                self.metrics.index_repairs.inc();
                self.metrics.misses.inc();
                Lookup::Miss
            }
        }
    }

    /// Returns the body of an entry regardless of freshness, without touching
    /// metrics or access times. Used to serve stale content when a refresh
    /// fails.
    pub fn read_stale(&self, key: &str) -> Option<Vec<u8>> {
        let path = {
            let index = self.index.lock().unwrap();
            index.entries.get(&hex_digest(key))?.file_path.clone()
        };
        fs::read(path).ok()
    }

    /// Stores `bytes` under `key`, replacing any prior entry.
    pub fn put(&self, key: &str, bytes: &[u8], ttl: Duration, now: Timestamp) -> Result<(), CacheError> {
        let digest = hex_digest(key);
        let final_path = self.objects_dir.join(&digest);
        let tmp_path = self.objects_dir.join(format!(
            "{TMP_PREFIX}{}-{}",
            std::process::id(),
            self.tmp_seq.fetch_add(1, Ordering::Relaxed)
        ));
        let fail = |source| CacheError::DiskWriteFailed {
            key: key.to_string(),
            source,
        };
        let written = fs::File::create(&tmp_path).and_then(|mut f| f.write_all(bytes));
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp_path);
            return Err(fail(e));
        }
        let mut index = self.index.lock().unwrap();
        if let Err(e) = fs::rename(&tmp_path, &final_path) {
            let _ = fs::remove_file(&tmp_path);
            return Err(fail(e));
        }
        index.insert(
            digest,
            CachedEntry {
                key: Some(key.to_string()),
                file_path: final_path,
                size_bytes: bytes.len() as u64,
                stored_at: now,
                ttl: Some(ttl),
                last_access: now,
            },
        );
        Ok(())
    }

    /// Evicts least-recently-used entries until `used_bytes <= max_bytes`.
    ///
    /// Returns evicted keys in eviction order. Ties on last access are broken
    /// by key order.
    pub fn enforce_capacity(&self, max_bytes: u64, _now: Timestamp) -> Vec<String> {
        let mut evicted = Vec::new();
        let mut index = self.index.lock().unwrap();
        while index.used_bytes > max_bytes {
            let Some((_, sort_key, digest)) = index.lru.first().cloned() else {
                break;
            };
            if let Some(entry) = index.remove(&digest) {
                match fs::remove_file(&entry.file_path) {
                    Ok(()) => {}
                    Err(e) if e.kind() == io::ErrorKind::NotFound => {}
                    Err(e) => log::warn!("failed to delete evicted object {}: {e}", entry.file_path.display()),
                }
            }
            self.metrics.evictions.inc();
            evicted.push(sort_key);
        }
        evicted
    }

    /// Blocks until no other caller is refreshing `key`, then claims it.
    pub fn begin_refresh(&self, key: &str) -> RefreshGuard<'_> {
        let mut set = self.in_flight.lock().unwrap();
        while set.contains(key) {
            set = self.flight_done.wait(set).unwrap();
        }
        set.insert(key.to_string());
        RefreshGuard {
            store: self,
            key: key.to_string(),
        }
    }

    pub fn used_bytes(&self) -> u64 {
        self.index.lock().unwrap().used_bytes
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, key: &str) -> Option<CachedEntry> {
        self.index.lock().unwrap().entries.get(&hex_digest(key)).cloned()
    }

    /// Keys of indexed entries (digests for entries with unknown keys).
    pub fn keys(&self) -> Vec<String> {
        let index = self.index.lock().unwrap();
        index.lru.iter().map(|(_, k, _)| k.clone()).collect()
    }

    /// Sums the on-disk sizes of all indexed files.
    pub fn rescan_used_bytes(&self) -> io::Result<u64> {
        let index = self.index.lock().unwrap();
        index
            .entries
            .values()
            .map(|e| fs::metadata(&e.file_path).map(|m| m.len()))
            .sum()
    }
}
