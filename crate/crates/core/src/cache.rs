//! Content-addressed store for expensive stage outputs.
//!
//! Keys are SHA-256 digests of everything a stage reads; payloads are raw
//! little-endian `f64` so cached values come back bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct StageCache {
    dir: PathBuf,
}

/// Incremental key builder.
#[derive(Debug, Clone, Default)]
pub struct CacheKey {
    hasher: Sha256,
}

impl CacheKey {
    pub fn new(stage: &str) -> Self {
        let mut k = Self::default();
        k.bytes(stage.as_bytes());
        k
    }

    /// Length-prefixed so concatenations stay unambiguous.
    pub fn bytes(&mut self, b: &[u8]) -> &mut Self {
        self.hasher.update((b.len() as u64).to_le_bytes());
        self.hasher.update(b);
        self
    }

    pub fn f64s(&mut self, values: &[f64]) -> &mut Self {
        self.hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.hasher.update(v.to_le_bytes());
        }
        self
    }

    pub fn usizes(&mut self, values: &[usize]) -> &mut Self {
        self.hasher.update((values.len() as u64).to_le_bytes());
        for v in values {
            self.hasher.update((*v as u64).to_le_bytes());
        }
        self
    }

    pub fn finish(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

impl StageCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, stage: &str, key: &str) -> PathBuf {
        self.dir.join(format!("{stage}-{key}.f64"))
    }

    pub fn get(&self, stage: &str, key: &str) -> Option<Vec<f64>> {
        let bytes = fs::read(self.path(stage, key)).ok()?;
        if bytes.len() % 8 != 0 {
            log::warn!("ignoring truncated cache entry {stage}-{key}");
            return None;
        }
        Some(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        )
    }

    pub fn put(&self, stage: &str, key: &str, values: &[f64]) -> Result<()> {
        let path = self.path(stage, key);
        let tmp = path.with_extension("tmp");
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }

    /// Cached value for `key`, computing and storing it on a miss.
    pub fn get_or_compute(
        &self,
        stage: &str,
        key: &str,
        compute: impl FnOnce() -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        if let Some(v) = self.get(stage, key) {
            log::debug!("cache hit {stage}-{key}");
            return Ok(v);
        }
        let v = compute()?;
        self.put(stage, key, &v)?;
        Ok(v)
    }
}
