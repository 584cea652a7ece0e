//! Content-addressed embedding store: one `<key>.bin` file of little-endian
//! f32 values per entry plus an append-only `index.jsonl`.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const INDEX_FILE: &str = "index.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub dim: usize,
    /// SHA-256 of the stored bytes.
    pub checksum: String,
}

/// Hit, miss and compute counts since the cache was opened.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
    pub computed: usize,
    pub recovered: usize,
}

/// Cache key over the checkpoint id, an encoder variant tag and the
/// representation bytes.
pub fn cache_key(checkpoint_id: &str, variant: &str, bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    for part in [checkpoint_id.as_bytes(), variant.as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Concurrent readers share the index through a read lock; writers are
/// serialized through a single mutex.
#[derive(Debug)]
pub struct EmbeddingCache {
    dir: PathBuf,
    index: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<()>,
    hits: AtomicUsize,
    misses: AtomicUsize,
    computed: AtomicUsize,
    recovered: AtomicUsize,
}

fn encode(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl EmbeddingCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = HashMap::new();
        let index_path = dir.join(INDEX_FILE);
        if index_path.exists() {
            let raw = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            for (i, line) in raw.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheEntry>(line) {
                    Ok(entry) => {
                        index.insert(entry.key.clone(), entry);
                    }
                    Err(e) => log::warn!("skipping unreadable cache index line {}: {e}", i + 1),
                }
            }
        }
        Ok(EmbeddingCache {
            dir: dir.to_path_buf(),
            index: RwLock::new(index),
            writer: Mutex::new(()),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
            computed: AtomicUsize::new(0),
            recovered: AtomicUsize::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("cache index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            computed: self.computed.load(Ordering::Relaxed),
            recovered: self.recovered.load(Ordering::Relaxed),
        }
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.bin"))
    }

    /// Stored vector for `key`, or `Ok(None)` when absent. A stored entry
    /// that fails its checksum is reported as corrupt through `Err`.
    fn read(&self, key: &str) -> std::result::Result<Option<Vec<f32>>, String> {
        let entry = match self.index.read().expect("cache index lock").get(key) {
            Some(e) => e.clone(),
            None => return Ok(None),
        };
        let bytes = std::fs::read(self.path_for(key)).map_err(|e| e.to_string())?;
        if bytes.len() != entry.dim * 4 {
            return Err(format!("expected {} bytes, found {}", entry.dim * 4, bytes.len()));
        }
        if checksum(&bytes) != entry.checksum {
            return Err("checksum mismatch".into());
        }
        Ok(Some(decode(&bytes)))
    }

    pub fn get(&self, key: &str) -> Option<Vec<f32>> {
        self.read(key).ok().flatten()
    }

    pub fn put(&self, key: &str, values: &[f32]) -> Result<()> {
        let _guard = self.writer.lock().expect("cache writer lock");
        let bytes = encode(values);
        let path = self.path_for(key);
        let tmp = self.dir.join(format!("{key}.bin.tmp"));
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        let entry = CacheEntry {
            key: key.to_string(),
            dim: values.len(),
            checksum: checksum(&bytes),
        };
        let index_path = self.dir.join(INDEX_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&index_path)
            .map_err(|e| Error::io(&index_path, e))?;
        writeln!(file, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&index_path, e))?;
        self.index.write().expect("cache index lock").insert(key.to_string(), entry);
        Ok(())
    }

    /// Returns the stored vector for `key`, calling `compute` only on a miss
    /// or when the stored entry is corrupt.
    pub fn get_or_compute<F>(&self, key: &str, compute: F) -> Result<Vec<f32>>
    where
        F: FnOnce() -> Result<Vec<f32>>,
    {
        match self.read(key) {
            Ok(Some(v)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(v);
            }
            Ok(None) => {}
            Err(why) => {
                log::warn!("cache entry {key} is corrupt ({why}); recomputing");
                self.recovered.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let v = compute()?;
        self.computed.fetch_add(1, Ordering::Relaxed);
        self.put(key, &v)?;
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miss_then_hit_computes_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let mut calls = 0;
        let key = cache_key("ckpt", "text", b"hello");
        for _ in 0..2 {
            cache
                .get_or_compute(&key, || {
                    calls += 1;
                    Ok(vec![1.0, 2.0])
                })
                .unwrap();
        }
        assert_eq!(calls, 1);
        assert_eq!(cache.stats().hits, 1);
        assert_eq!(cache.stats().misses, 1);
    }

    #[test]
    fn keys_depend_on_checkpoint() {
        assert_ne!(cache_key("a", "text", b"x"), cache_key("b", "text", b"x"));
        assert_ne!(cache_key("ab", "", b"x"), cache_key("a", "b", b"x"));
    }

    #[test]
    fn round_trip_is_bit_exact_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![f32::MIN_POSITIVE, -0.0, 1.0e-30, 3.14159, f32::MAX];
        let key = cache_key("c", "image", b"px");
        EmbeddingCache::open(dir.path()).unwrap().put(&key, &values).unwrap();
        let reopened = EmbeddingCache::open(dir.path()).unwrap();
        let got = reopened.get(&key).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got), bits(&values));
    }

    #[test]
    fn corrupt_entry_is_recomputed_and_overwritten() {
        let dir = tempfile::tempdir().unwrap();
        let cache = EmbeddingCache::open(dir.path()).unwrap();
        let key = cache_key("c", "text", b"y");
        cache.put(&key, &[1.0, 2.0, 3.0]).unwrap();
        std::fs::write(dir.path().join(format!("{key}.bin")), [0u8; 5]).unwrap();
        let v = cache.get_or_compute(&key, || Ok(vec![4.0, 5.0, 6.0])).unwrap();
        assert_eq!(v, vec![4.0, 5.0, 6.0]);
        assert_eq!(cache.stats().recovered, 1);
        assert_eq!(cache.get(&key).unwrap(), vec![4.0, 5.0, 6.0]);
    }
}
