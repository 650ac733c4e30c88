use std::num::NonZeroUsize;
use std::path::PathBuf;
use std::sync::Mutex;

use lru::LruCache;
use sha2::{Digest, Sha256};

use super::{ImageEmbedder, ImageInput, TextEmbedder};
use crate::error::Result;
use crate::scoring::EmbeddingVector;

pub type CacheKey = [u8; 32];

fn key(role: &str, model: &str, input: &[&[u8]]) -> CacheKey {
    let mut h = Sha256::new();
    for part in [role.as_bytes(), model.as_bytes()].into_iter().chain(input.iter().copied()) {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.finalize().into()
}

/// Content-addressed embedding cache in front of another embedder.
///
/// Keys are SHA-256 over (role, model, input bytes). Evicted entries are
/// written to `spill_dir` when one is configured and read back on a miss.
#[derive(Debug)]
pub struct CachedEmbedder<B> {
    inner: B,
    entries: Mutex<LruCache<CacheKey, EmbeddingVector>>,
    spill_dir: Option<PathBuf>,
    enabled: bool,
}

impl<B> CachedEmbedder<B> {
    pub fn new(inner: B, capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity >= 1");
        Self { inner, entries: Mutex::new(LruCache::new(cap)), spill_dir: None, enabled: true }
    }

    pub fn with_spill_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.spill_dir = Some(dir.into());
        self
    }

    /// Pass every request straight through.
    pub fn disabled(mut self) -> Self {
        self.enabled = false;
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn spill_path(&self, k: &CacheKey) -> Option<PathBuf> {
        self.spill_dir.as_ref().map(|d| d.join(format!("{}.json", hex::encode(k))))
    }

    fn lookup(&self, k: &CacheKey) -> Option<EmbeddingVector> {
        if let Some(v) = self.entries.lock().expect("cache poisoned").get(k) {
            return Some(v.clone());
        }
        let path = self.spill_path(k)?;
        let bytes = std::fs::read(path).ok()?;
        let v: EmbeddingVector = serde_json::from_slice(&bytes).ok()?;
        self.store(*k, v.clone());
        Some(v)
    }

    fn store(&self, k: CacheKey, v: EmbeddingVector) {
        let evicted = self.entries.lock().expect("cache poisoned").push(k, v);
        if let Some((old_key, old_value)) = evicted {
            if old_key == k {
                return;
            }
            if let Some(path) = self.spill_path(&old_key) {
                if let Some(dir) = path.parent() {
                    let _ = std::fs::create_dir_all(dir);
                }
                if let Ok(bytes) = serde_json::to_vec(&old_value) {
                    if let Err(e) = std::fs::write(&path, bytes) {
                        tracing::debug!("embedding cache spill to {} failed: {e}", path.display());
                    }
                }
            }
        }
    }
}

impl<B: TextEmbedder> TextEmbedder for CachedEmbedder<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_texts(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        if !self.enabled {
            return self.inner.embed_texts(texts);
        }
        let model = self.inner.model_id().to_string();
        let keys: Vec<CacheKey> = texts.iter().map(|t| key("text", &model, &[t.as_bytes()])).collect();
        let mut out: Vec<Option<EmbeddingVector>> = keys.iter().map(|k| self.lookup(k)).collect();
        let missing: Vec<usize> = (0..texts.len()).filter(|&i| out[i].is_none()).collect();
        if !missing.is_empty() {
            let batch: Vec<String> = missing.iter().map(|&i| texts[i].clone()).collect();
            let fresh = self.inner.embed_texts(&batch)?;
            if fresh.len() != batch.len() {
                return Err(crate::Error::MalformedResponse(format!("{} embeddings for {} inputs", fresh.len(), batch.len())));
            }
            for (&i, v) in missing.iter().zip(fresh) {
                self.store(keys[i], v.clone());
                out[i] = Some(v);
            }
        }
        Ok(out.into_iter().map(|v| v.expect("filled above")).collect())
    }
}

impl<B: ImageEmbedder> ImageEmbedder for CachedEmbedder<B> {
    fn embed_image(&self, input: &ImageInput<'_>) -> Result<EmbeddingVector> {
        if !self.enabled {
            return self.inner.embed_image(input);
        }
        let dims = [input.image.width().to_le_bytes(), input.image.height().to_le_bytes()].concat();
        let k = key("image", self.inner.model_id(), &[&dims, input.image.as_raw()]);
        if let Some(v) = self.lookup(&k) {
            return Ok(v);
        }
        let v = self.inner.embed_image(input)?;
        self.store(k, v.clone());
        Ok(v)
    }
}
