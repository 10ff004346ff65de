//! Reference-based caption metrics: corpus BLEU-1..4 and ROUGE-L.
//!
//! Both use [`tokenize`] so they see the same tokens as the CIDEr filter.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::fluency_filter::tokenize;

/// ROUGE-L recall weight: `F = (1 + b^2) P R / (R + b^2 P)` with `b = 1.2`.
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("candidate {0} has no references")]
    NoReferences(usize),
    #[error("empty corpus")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub sentence_count: usize,
}

fn check<S: AsRef<str>, R: AsRef<[S]>>(candidates: &[S], references: &[R]) -> Result<(), MetricsError> {
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    if candidates.is_empty() {
        return Err(MetricsError::Empty);
    }
    if let Some(i) = references.iter().position(|r| r.as_ref().is_empty()) {
        return Err(MetricsError::NoReferences(i));
    }
    Ok(())
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w).or_insert(0) += 1;
    }
    counts
}

/// Corpus-level clipped n-gram statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [u64; 4],
    pub guesses: [u64; 4],
    pub candidate_len: u64,
    pub reference_len: u64,
}

impl BleuStats {
    pub fn precisions(&self) -> [f64; 4] {
        std::array::from_fn(|n| {
            if self.guesses[n] == 0 {
                0.0
            } else {
                self.matches[n] as f64 / self.guesses[n] as f64
            }
        })
    }

    pub fn brevity_penalty(&self) -> f64 {
        let (c, r) = (self.candidate_len as f64, self.reference_len as f64);
        if self.candidate_len == 0 {
            0.0
        } else if c < r {
            (1.0 - r / c).exp()
        } else {
            1.0
        }
    }

    /// BLEU-1..4: brevity penalty times the geometric mean of the first n precisions.
    pub fn scores(&self) -> [f64; 4] {
        let p = self.precisions();
        let bp = self.brevity_penalty();
        std::array::from_fn(|n| {
            let used = &p[..=n];
            if used.contains(&0.0) {
                0.0
            } else {
                bp * (used.iter().map(|x| x.ln()).sum::<f64>() / (n + 1) as f64).exp()
            }
        })
    }
}

pub fn bleu_stats<S, R>(candidates: &[S], references: &[R]) -> Result<BleuStats, MetricsError>
where
    S: AsRef<str>,
    R: AsRef<[S]>,
{
    check(candidates, references)?;
    let mut stats = BleuStats::default();
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokenize(cand.as_ref());
        let rs: Vec<Vec<String>> = refs.as_ref().iter().map(|r| tokenize(r.as_ref())).collect();
        stats.candidate_len += c.len() as u64;
        // closest reference length, shorter on ties
        let closest = rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .unwrap_or(0);
        stats.reference_len += closest as u64;
        for n in 1..=4 {
            let cand_counts = ngram_counts(&c, n);
            let mut max_ref: HashMap<&[String], u64> = HashMap::new();
            for r in &rs {
                for (g, cnt) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(cnt);
                }
            }
            stats.guesses[n - 1] += c.len().saturating_sub(n - 1) as u64;
            stats.matches[n - 1] += cand_counts
                .iter()
                .map(|(g, &cnt)| cnt.min(max_ref.get(g).copied().unwrap_or(0)))
                .sum::<u64>();
        }
    }
    Ok(stats)
}

pub fn bleu<S, R>(candidates: &[S], references: &[R]) -> Result<[f64; 4], MetricsError>
where
    S: AsRef<str>,
    R: AsRef<[S]>,
{
    Ok(bleu_stats(candidates, references)?.scores())
}

/// Longest common subsequence length, `O(|a| |b|)` time, `O(|b|)` space.
pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn lcs_f(cand: &[String], refr: &[String], beta: f64) -> f64 {
    let lcs = lcs_len(cand, refr);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / refr.len() as f64;
    let b2 = beta * beta;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean over sentences of the best LCS F-score among each sentence's references.
pub fn rouge_l<S, R>(candidates: &[S], references: &[R]) -> Result<f64, MetricsError>
where
    S: AsRef<str>,
    R: AsRef<[S]>,
{
    check(candidates, references)?;
    let total: f64 = candidates
        .iter()
        .zip(references)
        .map(|(cand, refs)| {
            let c = tokenize(cand.as_ref());
            refs.as_ref()
                .iter()
                .map(|r| lcs_f(&c, &tokenize(r.as_ref()), ROUGE_BETA))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(total / candidates.len() as f64)
}

pub fn score_corpus<S, R>(candidates: &[S], references: &[R]) -> Result<CorpusScore, MetricsError>
where
    S: AsRef<str>,
    R: AsRef<[S]>,
{
    Ok(CorpusScore {
        bleu: bleu(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        sentence_count: candidates.len(),
    })
}
