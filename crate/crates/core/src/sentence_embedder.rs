//! Sentence embeddings used for tail grouping.
//!
//! The real pipeline would use a sentence encoder; offline runs use
//! [`HashEmbedder`], a signed feature-hashing embedder over unigrams and
//! bigrams of the shared tokenizer. It is deterministic across platforms
//! because bucket and sign come from SHA-256 of the feature bytes.

use sha2::{Digest, Sha256};

use crate::embedding_store::{EmbeddingStore, StoreError};
use crate::fluency_filter::tokenize;

pub const DEFAULT_HASH_DIM: usize = 64;

pub trait SentenceEmbedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Unit-norm embedding of `text`.
    fn embed(&self, text: &str) -> Vec<f32>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dim must be positive");
        Self { dim }
    }

    fn bucket(&self, feature: &str) -> (usize, f64) {
        let digest = Sha256::digest(feature.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().unwrap());
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        ((h % self.dim as u64) as usize, sign)
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self::new(DEFAULT_HASH_DIM)
    }
}

impl SentenceEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        let tokens = tokenize(text);
        let mut acc = vec![0.0f64; self.dim];
        for t in &tokens {
            let (i, s) = self.bucket(&format!("1:{t}"));
            acc[i] += s;
        }
        for w in tokens.windows(2) {
            let (i, s) = self.bucket(&format!("2:{} {}", w[0], w[1]));
            acc[i] += 0.5 * s;
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // empty text or fully cancelled features
            let mut v = vec![0.0f32; self.dim];
            v[0] = 1.0;
            return v;
        }
        acc.iter().map(|x| (x / norm) as f32).collect()
    }

    fn name(&self) -> String {
        format!("hash-{}", self.dim)
    }
}

/// Embed `(id, text)` pairs into a normalized store, keeping input order.
pub fn embed_texts<'a, I>(embedder: &dyn SentenceEmbedder, items: I) -> Result<EmbeddingStore, StoreError>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut ids = Vec::new();
    let mut data = Vec::new();
    for (id, text) in items {
        ids.push(id.to_owned());
        data.extend(embedder.embed(text));
    }
    EmbeddingStore::new(ids, embedder.dim(), data, true)
}
