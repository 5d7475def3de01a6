use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{GatewayError, TokenUsage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub output_text: String,
    pub provider: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_usage: Option<TokenUsage>,
}

/// On-disk response cache addressed by request hash: `<dir>/<key[..2]>/<key>.json`.
///
/// Entries are written once; later writes for the same key keep the first value.
#[derive(Debug)]
pub struct CacheStore {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

fn cache_err(e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Cache(e.to_string())
}

impl CacheStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(cache_err)?;
        Ok(Self {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        let shard = key.get(..2).unwrap_or("00");
        self.dir.join(shard).join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, GatewayError> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(cache_err),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(cache_err(e)),
        }
    }

    /// Stores `entry` unless the key already exists; returns whatever is stored.
    pub fn put_if_absent(&self, key: &str, entry: CacheEntry) -> Result<CacheEntry, GatewayError> {
        let _guard = self.write_lock.lock().unwrap();
        if let Some(existing) = self.get(key)? {
            return Ok(existing);
        }
        let path = self.path_for(key);
        let parent = path.parent().expect("cache path has a shard directory");
        fs::create_dir_all(parent).map_err(cache_err)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(cache_err)?;
        serde_json::to_writer(&mut tmp, &entry).map_err(cache_err)?;
        tmp.flush().map_err(cache_err)?;
        tmp.persist(&path).map_err(cache_err)?;
        Ok(entry)
    }

    pub fn len(&self) -> usize {
        walk_json(&self.dir)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn walk_json(dir: &Path) -> usize {
    let Ok(entries) = fs::read_dir(dir) else {
        return 0;
    };
    entries
        .flatten()
        .map(|e| {
            let p = e.path();
            if p.is_dir() {
                walk_json(&p)
            } else if p.extension().is_some_and(|x| x == "json") {
                1
            } else {
                0
            }
        })
        .sum()
}
