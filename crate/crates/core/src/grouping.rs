//! Rank-then-slice grouping of a [`TopK`].
//!
//! The first `m` descriptions form the head group that is summarized into the
//! first pseudo sentence. The remaining `k - m` are ordered by similarity to
//! that sentence and cut into `(k - m) / m` consecutive blocks of `m`.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::embedding_store::{l2_norm, EmbeddingStore, NORM_TOLERANCE};
use crate::retrieval::{dot, rank_order, TopK};

pub const DEFAULT_M: usize = 4;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GroupingError {
    #[error("group size m must be at least 1")]
    ZeroM,
    #[error("group size m = {m} exceeds the {available} retrieved descriptions")]
    MTooLarge { m: usize, available: usize },
    #[error("{remaining} remaining descriptions do not split into groups of {m}")]
    NotDivisible { remaining: usize, m: usize },
    #[error("head id {0:?} is not part of the top-k")]
    HeadNotInTopK(String),
    #[error("no sentence embedding for description {0:?}")]
    MissingEmbedding(String),
    #[error("first-sentence embedding has dim {got}, sentence store has {expected}")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("first-sentence embedding has norm {0}, expected 1")]
    NotNormalized(f64),
}

/// Partition of one image's top-k into a head group and equal tail groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupingPlan {
    pub image_id: String,
    pub k: usize,
    pub m: usize,
    pub n: usize,
    pub head: Vec<String>,
    pub tail_groups: Vec<Vec<String>>,
}

impl GroupingPlan {
    /// All groups in candidate order: head first, then tail blocks.
    pub fn groups(&self) -> impl Iterator<Item = &[String]> {
        std::iter::once(self.head.as_slice()).chain(self.tail_groups.iter().map(Vec::as_slice))
    }
}

/// JSON Lines form of a [`GroupingPlan`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupingRecord {
    pub image_id: String,
    pub head: Vec<String>,
    pub tail_groups: Vec<Vec<String>>,
}

impl From<&GroupingPlan> for GroupingRecord {
    fn from(p: &GroupingPlan) -> Self {
        Self {
            image_id: p.image_id.clone(),
            head: p.head.clone(),
            tail_groups: p.tail_groups.clone(),
        }
    }
}

impl From<GroupingRecord> for GroupingPlan {
    fn from(r: GroupingRecord) -> Self {
        let m = r.head.len();
        let n = r.tail_groups.len();
        Self {
            image_id: r.image_id,
            k: m + n * m,
            m,
            n,
            head: r.head,
            tail_groups: r.tail_groups,
        }
    }
}

/// Reject `(k, m)` pairs whose remainder does not split evenly.
pub fn validate_k_m(k: usize, m: usize) -> Result<(), GroupingError> {
    if m == 0 {
        return Err(GroupingError::ZeroM);
    }
    if m > k {
        return Err(GroupingError::MTooLarge { m, available: k });
    }
    if !(k - m).is_multiple_of(m) {
        return Err(GroupingError::NotDivisible {
            remaining: k - m,
            m,
        });
    }
    Ok(())
}

pub fn select_head(topk: &TopK, m: usize) -> Result<Vec<String>, GroupingError> {
    if m == 0 {
        return Err(GroupingError::ZeroM);
    }
    if m > topk.len() {
        return Err(GroupingError::MTooLarge {
            m,
            available: topk.len(),
        });
    }
    Ok(topk.entries[..m].iter().map(|e| e.desc_id.clone()).collect())
}

/// Order the non-head descriptions by cosine similarity to the first pseudo
/// sentence (ties by retrieval rank) and cut them into blocks of `head.len()`.
pub fn partition_remainder(
    topk: &TopK,
    head: &[String],
    c1_embedding: &[f32],
    sentence_store: &EmbeddingStore,
) -> Result<GroupingPlan, GroupingError> {
    let m = head.len();
    if m == 0 {
        return Err(GroupingError::ZeroM);
    }
    let head_set: HashSet<&str> = head.iter().map(String::as_str).collect();
    for h in head {
        if !topk.ids().any(|id| id == h) {
            return Err(GroupingError::HeadNotInTopK(h.clone()));
        }
    }
    let remainder: Vec<(usize, &str)> = topk
        .ids()
        .enumerate()
        .filter(|(_, id)| !head_set.contains(id))
        .collect();
    if !remainder.len().is_multiple_of(m) {
        return Err(GroupingError::NotDivisible {
            remaining: remainder.len(),
            m,
        });
    }
    if c1_embedding.len() != sentence_store.dim() {
        return Err(GroupingError::DimensionMismatch {
            got: c1_embedding.len(),
            expected: sentence_store.dim(),
        });
    }
    let norm = l2_norm(c1_embedding);
    if (norm - 1.0).abs() > NORM_TOLERANCE {
        return Err(GroupingError::NotNormalized(norm));
    }

    let mut scored = Vec::with_capacity(remainder.len());
    for &(rank, id) in &remainder {
        let v = sentence_store
            .get(id)
            .ok_or_else(|| GroupingError::MissingEmbedding(id.to_owned()))?;
        scored.push((rank, dot(c1_embedding, v), id));
    }
    scored.sort_by(|a, b| rank_order((a.0, a.1), (b.0, b.1)));

    let tail_groups: Vec<Vec<String>> = scored
        .chunks(m)
        .map(|block| block.iter().map(|(_, _, id)| (*id).to_owned()).collect())
        .collect();
    Ok(GroupingPlan {
        image_id: topk.image_id.clone(),
        k: topk.len(),
        m,
        n: tail_groups.len(),
        head: head.to_vec(),
        tail_groups,
    })
}

/// Group texts for summarization, with exact-duplicate texts collapsed onto
/// their highest-ranked occurrence.
pub fn dedup_texts<'a, I>(texts: I) -> Vec<String>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut seen = HashSet::new();
    texts
        .into_iter()
        .filter(|t| seen.insert(*t))
        .map(str::to_owned)
        .collect()
}
