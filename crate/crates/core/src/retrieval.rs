//! Exact cosine scoring and top-k ranking of region descriptions per image.
//!
//! Ordering is total: score descending, then ascending row position in the
//! description store. Every ranking in the crate goes through [`rank_order`].

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding_store::{l2_norm, EmbeddingStore, NORM_TOLERANCE};

/// Default retrieval depth.
pub const DEFAULT_K: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("dimension mismatch: query has {query}, store has {store}")]
    DimensionMismatch { query: usize, store: usize },
    #[error("store is not unit-normalized")]
    StoreNotNormalized,
    #[error("query vector has norm {0}, expected 1")]
    QueryNotNormalized(f64),
    #[error("unknown image id {0:?}")]
    UnknownImage(String),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredDescription {
    pub desc_id: String,
    pub score: f64,
}

/// Full similarity ranking of the description corpus for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedDescriptions {
    pub image_id: String,
    pub entries: Vec<ScoredDescription>,
}

/// The first `k` entries of a ranking.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub image_id: String,
    pub k: usize,
    pub entries: Vec<ScoredDescription>,
}

impl TopK {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.desc_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// JSON Lines form of a [`TopK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKRecord {
    pub image_id: String,
    pub topk: Vec<ScoredDescription>,
}

impl From<&TopK> for TopKRecord {
    fn from(t: &TopK) -> Self {
        Self {
            image_id: t.image_id.clone(),
            topk: t.entries.clone(),
        }
    }
}

impl From<TopKRecord> for TopK {
    fn from(r: TopKRecord) -> Self {
        Self {
            image_id: r.image_id,
            k: r.topk.len(),
            entries: r.topk,
        }
    }
}

/// Score-descending, position-ascending comparison of `(position, score)` pairs.
/// Signed zeros compare equal.
pub fn rank_order(a: (usize, f64), b: (usize, f64)) -> Ordering {
    // adding 0.0 maps -0.0 to +0.0, which total_cmp would otherwise order below it
    (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0))
}

fn check_query(query: &[f32], store: &EmbeddingStore) -> Result<(), RetrievalError> {
    if query.len() != store.dim() {
        return Err(RetrievalError::DimensionMismatch {
            query: query.len(),
            store: store.dim(),
        });
    }
    if !store.is_normalized() {
        return Err(RetrievalError::StoreNotNormalized);
    }
    let norm = l2_norm(query);
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(RetrievalError::QueryNotNormalized(norm));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Cosine score of `query` against every row, in store order.
///
/// Both sides are unit vectors, so the score is a dot product accumulated in
/// `f64` and clamped to `[-1, 1]` to absorb `f32` storage rounding.
pub fn score_rows(query: &[f32], store: &EmbeddingStore) -> Result<Vec<f64>, RetrievalError> {
    check_query(query, store)?;
    Ok(store
        .as_slice()
        .chunks_exact(store.dim())
        .map(|row| dot(query, row).clamp(-1.0, 1.0))
        .collect())
}

pub fn cosine_scores<'s>(
    query: &[f32],
    store: &'s EmbeddingStore,
) -> Result<Vec<(&'s str, f64)>, RetrievalError> {
    let scores = score_rows(query, store)?;
    Ok(store
        .ids()
        .iter()
        .map(String::as_str)
        .zip(scores)
        .collect())
}

fn image_query<'a>(
    image_id: &str,
    image_store: &'a EmbeddingStore,
) -> Result<&'a [f32], RetrievalError> {
    image_store
        .get(image_id)
        .ok_or_else(|| RetrievalError::UnknownImage(image_id.to_owned()))
}

fn to_entries(order: &[usize], scores: &[f64], store: &EmbeddingStore) -> Vec<ScoredDescription> {
    order
        .iter()
        .map(|&i| ScoredDescription {
            desc_id: store.ids()[i].clone(),
            score: scores[i],
        })
        .collect()
}

pub fn rank_descriptions(
    image_id: &str,
    image_store: &EmbeddingStore,
    desc_store: &EmbeddingStore,
) -> Result<RankedDescriptions, RetrievalError> {
    let query = image_query(image_id, image_store)?;
    let scores = score_rows(query, desc_store)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| rank_order((a, scores[a]), (b, scores[b])));
    Ok(RankedDescriptions {
        image_id: image_id.to_owned(),
        entries: to_entries(&order, &scores, desc_store),
    })
}

pub fn take_top_k(ranked: &RankedDescriptions, k: usize) -> Result<TopK, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    Ok(TopK {
        image_id: ranked.image_id.clone(),
        k,
        entries: ranked.entries.iter().take(k).cloned().collect(),
    })
}

/// Top-k without sorting the whole corpus: partial selection under the same
/// total order, then a sort of the k-prefix. Equal to
/// `take_top_k(rank_descriptions(..), k)`.
pub fn top_k_for_image(
    image_id: &str,
    image_store: &EmbeddingStore,
    desc_store: &EmbeddingStore,
    k: usize,
) -> Result<TopK, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::ZeroK);
    }
    let query = image_query(image_id, image_store)?;
    let scores = score_rows(query, desc_store)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    let cmp = |&a: &usize, &b: &usize| rank_order((a, scores[a]), (b, scores[b]));
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(TopK {
        image_id: image_id.to_owned(),
        k,
        entries: to_entries(&order, &scores, desc_store),
    })
}

/// Top-k for many images in parallel; results follow `image_ids` order.
pub fn top_k_batch(
    image_ids: &[String],
    image_store: &EmbeddingStore,
    desc_store: &EmbeddingStore,
    k: usize,
) -> Vec<Result<TopK, RetrievalError>> {
    image_ids
        .par_iter()
        .map(|id| top_k_for_image(id, image_store, desc_store, k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding_store::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_store(rows: Vec<(&str, Vec<f32>)>) -> EmbeddingStore {
        l2_normalize(&EmbeddingStore::from_rows(rows, false).unwrap()).unwrap()
    }

    fn random_store(rng: &mut ChaCha8Rng, n: usize, dim: usize, prefix: &str) -> EmbeddingStore {
        let rows: Vec<(String, Vec<f32>)> = (0..n)
            .map(|i| {
                (
                    format!("{prefix}{i}"),
                    (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
                )
            })
            .collect();
        l2_normalize(&EmbeddingStore::from_rows(rows, false).unwrap()).unwrap()
    }

    #[test]
    fn signed_zeros_tie() {
        assert_eq!(rank_order((0, -0.0), (1, 0.0)), Ordering::Less);
        assert_eq!(rank_order((1, -0.0), (0, 0.0)), Ordering::Greater);
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = random_store(&mut rng, 10, 8, "d");
        let q = store.get("d3").unwrap().to_vec();
        let scores = cosine_scores(&q, &store).unwrap();
        assert!((scores[3].1 - 1.0).abs() < 1e-6);
        let best = scores
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(best.0, "d3");
    }

    #[test]
    fn orthogonal_is_zero() {
        let store = unit_store(vec![("d1", vec![1.0, 0.0, 0.0]), ("d2", vec![0.0, 1.0, 0.0])]);
        let scores = cosine_scores(&[0.0, 1.0, 0.0], &store).unwrap();
        assert!(scores[0].1.abs() < 1e-9);
        assert!((scores[1].1 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn matches_naive_dot_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let store = random_store(&mut rng, 1000, 32, "d");
        let qs = random_store(&mut rng, 1, 32, "q");
        let q = qs.row(0);
        let scores = cosine_scores(q, &store).unwrap();
        for (row, (_, s)) in scores.iter().enumerate() {
            let mut acc = 0.0f64;
            for (x, y) in q.iter().zip(store.row(row)) {
                acc += *x as f64 * *y as f64;
            }
            assert!((acc - s).abs() <= 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch() {
        let store = unit_store(vec![("d1", vec![1.0, 0.0])]);
        assert!(matches!(
            cosine_scores(&[1.0, 0.0, 0.0], &store),
            Err(RetrievalError::DimensionMismatch { query: 3, store: 2 })
        ));
    }

    #[test]
    fn singleton_corpus() {
        let images = unit_store(vec![("img", vec![1.0, 1.0])]);
        let descs = unit_store(vec![("d1", vec![1.0, 0.0])]);
        let ranked = rank_descriptions("img", &images, &descs).unwrap();
        assert_eq!(ranked.entries.len(), 1);
    }

    #[test]
    fn ties_follow_file_order() {
        let images = unit_store(vec![("img", vec![1.0, 0.0])]);
        let descs = unit_store(vec![
            ("z", vec![0.0, 1.0]),
            ("b", vec![1.0, 1.0]),
            ("a", vec![1.0, 1.0]),
        ]);
        let ranked = rank_descriptions("img", &images, &descs).unwrap();
        let ids: Vec<_> = ranked.entries.iter().map(|e| e.desc_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "z"]);
        let top = top_k_for_image("img", &images, &descs, 2).unwrap();
        assert_eq!(top.ids().collect::<Vec<_>>(), ["b", "a"]);
    }

    #[test]
    fn unknown_image() {
        let images = unit_store(vec![("img", vec![1.0, 0.0])]);
        assert!(matches!(
            rank_descriptions("nope", &images, &images),
            Err(RetrievalError::UnknownImage(_))
        ));
    }

    #[test]
    fn top_k_clamps_to_corpus() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let images = random_store(&mut rng, 1, 4, "i");
        let descs = random_store(&mut rng, 10, 4, "d");
        let ranked = rank_descriptions("i0", &images, &descs).unwrap();
        assert_eq!(take_top_k(&ranked, 16).unwrap().len(), 10);
        assert_eq!(take_top_k(&ranked, 10).unwrap().entries, ranked.entries);
        assert_eq!(top_k_for_image("i0", &images, &descs, 16).unwrap().len(), 10);
        assert!(matches!(take_top_k(&ranked, 0), Err(RetrievalError::ZeroK)));
    }

    #[test]
    fn fast_path_equals_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let images = random_store(&mut rng, 10, 8, "i");
        let descs = random_store(&mut rng, 300, 8, "d");
        for id in images.ids() {
            let full = rank_descriptions(id, &images, &descs).unwrap();
            for k in [1, 7, 16, 299, 300, 400] {
                let a = take_top_k(&full, k).unwrap();
                let b = top_k_for_image(id, &images, &descs, k).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn batch_preserves_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let images = random_store(&mut rng, 12, 8, "i");
        let descs = random_store(&mut rng, 40, 8, "d");
        let ids: Vec<String> = images.ids().iter().rev().cloned().collect();
        let out = top_k_batch(&ids, &images, &descs, 4);
        for (id, t) in ids.iter().zip(out) {
            assert_eq!(&t.unwrap().image_id, id);
        }
    }
}
