//! Content-addressed, file-backed response cache.
//!
//! Entries live at `{cache_dir}/{backend_id}/{key[0:2]}/{key}` where `key`
//! is the SHA-256 of the backend identity plus the canonicalized request.
//! The cache is append-only within a run: an existing entry is never
//! overwritten. Readers may run concurrently; writers are serialized.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::sha256_hex;

pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    /// Opens (creating if needed) a cache rooted at `dir`.
    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(ResponseCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    /// Cache key over the backend identity and the canonical request text.
    pub fn key_for(&self, backend_id: &str, canonical_request: &str) -> String {
        let mut material = String::with_capacity(backend_id.len() + canonical_request.len() + 1);
        material.push_str(backend_id);
        material.push('\n');
        material.push_str(canonical_request);
        sha256_hex(material.as_bytes())
    }

    fn entry_path(&self, backend_id: &str, key: &str) -> PathBuf {
        let shard = &key[0..2];
        self.dir.join(sanitize(backend_id)).join(shard).join(key)
    }

    pub fn get(&self, backend_id: &str, key: &str) -> Option<Vec<u8>> {
        fs::read(self.entry_path(backend_id, key)).ok()
    }

    pub fn contains(&self, backend_id: &str, key: &str) -> bool {
        self.entry_path(backend_id, key).exists()
    }

    /// Stores an entry unless one already exists (append-only semantics).
    pub fn put(&self, backend_id: &str, key: &str, value: &[u8]) -> io::Result<()> {
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        let path = self.entry_path(backend_id, key);
        if path.exists() {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        // Write via a temp file so readers never observe a partial entry.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, value)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

/// Backend ids become directory names; keep them path-safe.
fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_and_shards_by_prefix() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache.key_for("judge-1", r#"{"text":"score this"}"#);
        assert!(cache.get("judge-1", &key).is_none());
        cache.put("judge-1", &key, b"coverage: 80").unwrap();
        assert_eq!(cache.get("judge-1", &key).unwrap(), b"coverage: 80");
        let expected = dir
            .path()
            .join("judge-1")
            .join(&key[0..2])
            .join(&key);
        assert!(expected.exists());
    }

    #[test]
    fn put_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = cache.key_for("b", "req");
        cache.put("b", &key, b"first").unwrap();
        cache.put("b", &key, b"second").unwrap();
        assert_eq!(cache.get("b", &key).unwrap(), b"first");
    }

    #[test]
    fn distinct_backends_do_not_collide() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key_a = cache.key_for("a", "req");
        let key_b = cache.key_for("b", "req");
        assert_ne!(key_a, key_b);
    }
}
