//! On-disk embedding cache keyed by (encoder, item id, augmentation seed).
//!
//! Layout: header (encoder name, fingerprint, dim, count), then an id table
//! of `(item_id, aug_seed)` pairs, then `count * dim` little-endian `f32`.
//! Readers share an `RwLock`; `flush` serializes writers and replaces the
//! file atomically.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::{Embedding, Image, Modality, TextEncoder, VisualEncoder};
use crate::error::{Error, Result};
use crate::io::{write_atomic, BinReader, BinWriter};
use crate::linalg::convert;
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"LAEC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey {
    pub item_id: String,
    pub aug_seed: u64,
}

impl CacheKey {
    pub fn new(item_id: impl Into<String>, aug_seed: u64) -> Self {
        Self {
            item_id: item_id.into(),
            aug_seed,
        }
    }
}

#[derive(Debug, Default)]
struct Entries {
    index: HashMap<CacheKey, usize>,
    keys: Vec<CacheKey>,
    vectors: Vec<f32>,
    dirty: bool,
}

#[derive(Debug)]
pub struct EmbeddingCache {
    path: PathBuf,
    encoder: String,
    fingerprint: String,
    dim: usize,
    entries: RwLock<Entries>,
    writer: Mutex<()>,
}

impl EmbeddingCache {
    /// Opens `path` if it exists, otherwise starts empty. An existing file
    /// written for another encoder, fingerprint or dimension is refused.
    pub fn open(path: &Path, encoder: &str, fingerprint: &str, dim: usize) -> Result<Self> {
        let mut entries = Entries::default();
        if path.exists() {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            let (mut r, _) = BinReader::open(&bytes, path, MAGIC)?;
            let name = r.str()?;
            let fp = r.str()?;
            let file_dim = r.u32()? as usize;
            let count = r.u64()? as usize;
            let stale = |reason: String| Error::StaleCache {
                path: path.to_path_buf(),
                reason,
            };
            if name != encoder {
                return Err(stale(format!(
                    "built by encoder {name:?}, expected {encoder:?}"
                )));
            }
            if file_dim != dim {
                return Err(stale(format!("dimension {file_dim}, expected {dim}")));
            }
            if fp != fingerprint {
                return Err(stale(format!(
                    "encoder fingerprint {fp} differs from {fingerprint}"
                )));
            }
            for i in 0..count {
                let key = CacheKey::new(r.str()?, r.u64()?);
                if entries.index.insert(key.clone(), i).is_some() {
                    return Err(r.err(format!("duplicate cache key {:?}", key.item_id)));
                }
                entries.keys.push(key);
            }
            entries.vectors = r.f32s(count * dim)?;
            r.finish()?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            encoder: encoder.to_string(),
            fingerprint: fingerprint.to_string(),
            dim,
            entries: RwLock::new(entries),
            writer: Mutex::new(()),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock").keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries
            .read()
            .expect("cache lock")
            .index
            .contains_key(key)
    }

    pub fn keys(&self) -> Vec<CacheKey> {
        self.entries.read().expect("cache lock").keys.clone()
    }

    pub fn get(&self, key: &CacheKey) -> Result<Vec<f32>> {
        let e = self.entries.read().expect("cache lock");
        let i = *e.index.get(key).ok_or_else(|| {
            Error::CacheMiss(format!("{} (aug seed {})", key.item_id, key.aug_seed))
        })?;
        Ok(e.vectors[i * self.dim..(i + 1) * self.dim].to_vec())
    }

    /// Un-augmented entry of `item_id` as an embedding.
    pub fn lookup<T: Scalar>(&self, item_id: &str, source: Modality) -> Result<Embedding<T>> {
        Embedding::new(convert(&self.get(&CacheKey::new(item_id, 0))?), source)
    }

    /// Inserts or replaces one vector (stored as `f32`).
    pub fn insert<T: Scalar>(&self, key: CacheKey, values: &[T]) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::shape("cached embedding", self.dim, values.len()));
        }
        let mut e = self.entries.write().expect("cache lock");
        let v: Vec<f32> = values.iter().map(|x| x.f32()).collect();
        match e.index.get(&key).copied() {
            Some(i) => e.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(&v),
            None => {
                let i = e.keys.len();
                e.index.insert(key.clone(), i);
                e.keys.push(key);
                e.vectors.extend_from_slice(&v);
            }
        }
        e.dirty = true;
        Ok(())
    }

    /// Writes the cache if anything changed since it was opened.
    pub fn flush(&self) -> Result<()> {
        let _guard = self.writer.lock().expect("cache writer lock");
        let bytes = {
            let e = self.entries.read().expect("cache lock");
            if !e.dirty && self.path.exists() {
                return Ok(());
            }
            let mut w = BinWriter::new(MAGIC, VERSION);
            w.str(&self.encoder)
                .str(&self.fingerprint)
                .u32(self.dim as u32)
                .u64(e.keys.len() as u64);
            for k in &e.keys {
                w.str(&k.item_id).u64(k.aug_seed);
            }
            w.f32s(e.vectors.iter().copied());
            w.into_bytes()
        };
        write_atomic(&self.path, &bytes)?;
        self.entries.write().expect("cache lock").dirty = false;
        Ok(())
    }
}

/// Encodes every `(id, text)` not already cached and flushes.
pub fn cache_text_embeddings<T: Scalar>(
    encoder: &dyn TextEncoder<T>,
    items: &[(String, String)],
    path: &Path,
) -> Result<EmbeddingCache> {
    let spec = encoder.spec();
    let cache = EmbeddingCache::open(path, &spec.name, &encoder.fingerprint(), spec.embed_dim)?;
    let missing: Vec<&(String, String)> = items
        .iter()
        .filter(|(id, _)| !cache.contains(&CacheKey::new(id.as_str(), 0)))
        .collect();
    if !missing.is_empty() {
        let texts: Vec<&str> = missing.iter().map(|(_, t)| t.as_str()).collect();
        for ((id, _), emb) in missing.iter().zip(encoder.encode_text(&texts)?) {
            cache.insert(CacheKey::new(id.as_str(), 0), emb.values())?;
        }
    }
    cache.flush()?;
    Ok(cache)
}

/// Encodes (without prompt) every `(id, image)` not already cached and flushes.
pub fn cache_image_embeddings<T: Scalar>(
    encoder: &dyn VisualEncoder<T>,
    items: &[(String, Image)],
    path: &Path,
) -> Result<EmbeddingCache> {
    let spec = encoder.spec();
    let cache = EmbeddingCache::open(path, &spec.name, &encoder.fingerprint(), spec.embed_dim)?;
    for (id, image) in items {
        let key = CacheKey::new(id.as_str(), 0);
        if !cache.contains(&key) {
            cache.insert(key, encoder.encode_image(image, None)?.values())?;
        }
    }
    cache.flush()?;
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ToyTextConfig, ToyTextEncoder};

    fn items() -> Vec<(String, String)> {
        ["dense opacity", "clear lungs", "cavity in apex"]
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("d{i}"), t.to_string()))
            .collect()
    }

    #[test]
    fn cold_and_warm_lookups_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.cache");
        let enc = ToyTextEncoder::<f32>::new(ToyTextConfig::default()).unwrap();
        let cold = cache_text_embeddings(&enc, &items(), &path).unwrap();
        let warm = cache_text_embeddings(&enc, &items(), &path).unwrap();
        assert_eq!(warm.len(), 3);
        for (id, _) in items() {
            let k = CacheKey::new(id, 0);
            assert_eq!(cold.get(&k).unwrap(), warm.get(&k).unwrap());
        }
    }

    #[test]
    fn unknown_id_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let c = EmbeddingCache::open(&dir.path().join("c"), "e", "fp", 4).unwrap();
        assert!(matches!(
            c.get(&CacheKey::new("nope", 0)),
            Err(Error::CacheMiss(_))
        ));
    }

    #[test]
    fn other_encoder_is_stale() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.cache");
        let enc = ToyTextEncoder::<f32>::new(ToyTextConfig::default()).unwrap();
        cache_text_embeddings(&enc, &items(), &path).unwrap();
        let other = ToyTextEncoder::<f32>::new(ToyTextConfig {
            seed: 99,
            ..ToyTextConfig::default()
        })
        .unwrap();
        assert!(matches!(
            cache_text_embeddings(&other, &items(), &path),
            Err(Error::StaleCache { .. })
        ));
        assert!(matches!(
            EmbeddingCache::open(&path, "toy-text", "x", 256),
            Err(Error::StaleCache { .. })
        ));
    }

    #[test]
    fn augmentation_seed_is_part_of_the_key() {
        let dir = tempfile::tempdir().unwrap();
        let c = EmbeddingCache::open(&dir.path().join("c"), "e", "fp", 2).unwrap();
        c.insert(CacheKey::new("a", 0), &[1.0f32, 0.0]).unwrap();
        c.insert(CacheKey::new("a", 7), &[0.0f32, 1.0]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.get(&CacheKey::new("a", 7)).unwrap(), vec![0.0, 1.0]);
        assert!(c.insert(CacheKey::new("b", 0), &[1.0f32]).is_err());
    }
}
