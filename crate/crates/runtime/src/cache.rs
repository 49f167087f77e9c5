//! Content-addressed on-disk store of raw replies.
//!
//! Layout: `<root>/<first two hex digits>/<digest>.json`, one entry per file.
//! Entries are written to a temporary file and renamed into place, so
//! readers never see a partial entry.

use std::collections::HashMap;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex};

use modevote_core::{ModeConfig, Sampling};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::Mutex;

/// Stored reply plus enough metadata to audit where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub mode_id: String,
    pub q_uid: String,
    pub stage: String,
    pub backend: String,
    pub text: String,
}

/// Digest of everything that determines a reply. Any change to the prompt
/// bytes, the mode, the backend identity or the sampling settings changes it.
pub fn cache_key(mode: &ModeConfig, q_uid: &str, stage: &str, prompt: &str, backend_fingerprint: &str, sampling: &Sampling) -> String {
    let mut hasher = Sha256::new();
    for part in [
        mode.fingerprint().as_bytes(),
        q_uid.as_bytes(),
        stage.as_bytes(),
        backend_fingerprint.as_bytes(),
        &sampling.temperature.to_bits().to_le_bytes(),
        &sampling.max_tokens.to_le_bytes(),
        prompt.as_bytes(),
    ] {
        // Length prefixes keep field boundaries unambiguous.
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    hex::encode(hasher.finalize())
}

pub struct ResponseCache {
    root: PathBuf,
    locks: StdMutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl ResponseCache {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        std::fs::create_dir_all(&root)?;
        Ok(ResponseCache {
            root,
            locks: StdMutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn path(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("__");
        self.root.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> io::Result<Option<CacheEntry>> {
        match std::fs::read(self.path(key)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(io::Error::other),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn put(&self, entry: &CacheEntry) -> io::Result<()> {
        let path = self.path(&entry.key);
        let dir = path.parent().expect("cache paths have a shard directory");
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(&serde_json::to_vec_pretty(entry).map_err(io::Error::other)?)?;
        tmp.persist(&path).map_err(|e| e.error)?;
        Ok(())
    }

    /// Returns the cached entry for `entry.key`, or runs `fetch`, stores its
    /// text and returns that. Concurrent callers with the same key wait for
    /// the first one, so each key is fetched at most once. The flag is true
    /// on a hit.
    pub async fn get_or_fetch<F, Fut, E>(&self, mut entry: CacheEntry, fetch: F) -> Result<(CacheEntry, bool), E>
    where
        F: FnOnce() -> Fut,
        Fut: std::future::Future<Output = Result<String, E>>,
        E: From<io::Error>,
    {
        let lock = {
            let mut locks = self.locks.lock().expect("lock table poisoned");
            locks.entry(entry.key.clone()).or_default().clone()
        };
        let _guard = lock.lock().await;
        if let Some(hit) = self.get(&entry.key)? {
            return Ok((hit, true));
        }
        entry.text = fetch().await?;
        self.put(&entry)?;
        Ok((entry, false))
    }
}
