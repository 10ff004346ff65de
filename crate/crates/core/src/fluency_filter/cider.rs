//! CIDEr and CIDEr-D over word n-grams, n = 1..4.
//!
//! Weights are `tf * (ln M - ln max(1, df))` with document frequencies from an
//! [`IdfTable`]; n-grams the table has never seen get `df = 1`. CIDEr-D clips
//! the candidate weight at the reference weight inside the dot product and
//! applies a Gaussian penalty on the token-length difference.

use std::collections::{BTreeMap, HashMap};

use super::{tokenize, FilterError};

pub const MAX_N: usize = 4;
pub const DEFAULT_SIGMA: f64 = 6.0;

/// n-gram term frequencies for one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NGramProfile {
    /// `counts[n - 1]` maps space-joined n-grams to their count.
    pub counts: [BTreeMap<String, u32>; MAX_N],
    pub len: usize,
}

impl NGramProfile {
    pub fn from_tokens(tokens: &[String]) -> Self {
        let mut counts: [BTreeMap<String, u32>; MAX_N] = Default::default();
        for (n, table) in counts.iter_mut().enumerate() {
            for w in tokens.windows(n + 1) {
                *table.entry(w.join(" ")).or_insert(0) += 1;
            }
        }
        Self {
            counts,
            len: tokens.len(),
        }
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_tokens(&tokenize(text))
    }
}

/// Document frequencies over a corpus of sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdfTable {
    pub df: [HashMap<String, u32>; MAX_N],
    pub doc_count: usize,
}

impl IdfTable {
    pub fn build<S: AsRef<str>>(corpus: &[S]) -> Result<Self, FilterError> {
        if corpus.is_empty() {
            return Err(FilterError::EmptyCorpus);
        }
        let mut df: [HashMap<String, u32>; MAX_N] = Default::default();
        for doc in corpus {
            let profile = NGramProfile::from_text(doc.as_ref());
            for (n, table) in profile.counts.iter().enumerate() {
                for gram in table.keys() {
                    *df[n].entry(gram.clone()).or_insert(0) += 1;
                }
            }
        }
        Ok(Self {
            df,
            doc_count: corpus.len(),
        })
    }

    /// Document frequency, 0 if never seen.
    pub fn df(&self, n: usize, gram: &str) -> u32 {
        self.df[n - 1].get(gram).copied().unwrap_or(0)
    }

    pub fn idf(&self, n: usize, gram: &str) -> f64 {
        let df = self.df(n, gram).max(1);
        (self.doc_count as f64).ln() - f64::from(df).ln()
    }
}

pub fn build_idf<S: AsRef<str>>(corpus: &[S]) -> Result<IdfTable, FilterError> {
    IdfTable::build(corpus)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CiderVariant {
    /// Clipped weights and Gaussian length penalty.
    #[default]
    CiderD,
    /// Plain TF-IDF cosine, no clipping and no length penalty.
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiderParams {
    pub variant: CiderVariant,
    pub sigma: f64,
}

impl Default for CiderParams {
    fn default() -> Self {
        Self {
            variant: CiderVariant::CiderD,
            sigma: DEFAULT_SIGMA,
        }
    }
}

/// TF-IDF weights and per-n norms of one sentence.
#[derive(Debug, Clone)]
pub struct WeightedProfile {
    // ordered so that float sums do not depend on hash seeds
    weights: [BTreeMap<String, f64>; MAX_N],
    norms: [f64; MAX_N],
    len: usize,
}

impl WeightedProfile {
    pub fn new(profile: &NGramProfile, idf: &IdfTable) -> Self {
        let mut weights: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (gram, &tf) in &profile.counts[n] {
                let w = f64::from(tf) * idf.idf(n + 1, gram);
                norms[n] += w * w;
                weights[n].insert(gram.clone(), w);
            }
            norms[n] = norms[n].sqrt();
        }
        Self {
            weights,
            norms,
            len: profile.len,
        }
    }

    pub fn from_text(text: &str, idf: &IdfTable) -> Self {
        Self::new(&NGramProfile::from_text(text), idf)
    }
}

/// Per-n similarity between a candidate and one reference.
fn similarity(cand: &WeightedProfile, refr: &WeightedProfile, params: CiderParams) -> [f64; MAX_N] {
    let penalty = match params.variant {
        CiderVariant::CiderD => {
            let delta = cand.len as f64 - refr.len as f64;
            (-(delta * delta) / (2.0 * params.sigma * params.sigma)).exp()
        }
        CiderVariant::Plain => 1.0,
    };
    let mut out = [0.0; MAX_N];
    for (n, slot) in out.iter_mut().enumerate() {
        let mut val = 0.0;
        for (gram, &wc) in &cand.weights[n] {
            if let Some(&wr) = refr.weights[n].get(gram) {
                val += match params.variant {
                    CiderVariant::CiderD => wc.min(wr) * wr,
                    CiderVariant::Plain => wc * wr,
                };
            }
        }
        if cand.norms[n] != 0.0 && refr.norms[n] != 0.0 {
            val /= cand.norms[n] * refr.norms[n];
        }
        *slot = val * penalty;
    }
    out
}

/// Score a candidate against precomputed reference profiles.
pub fn cider_weighted(cand: &WeightedProfile, refs: &[WeightedProfile], params: CiderParams) -> f64 {
    if refs.is_empty() || cand.len == 0 {
        return 0.0;
    }
    let total: f64 = refs
        .iter()
        .map(|r| similarity(cand, r, params).iter().sum::<f64>() / MAX_N as f64)
        .sum();
    (total / refs.len() as f64 * 10.0).clamp(0.0, 10.0)
}

/// CIDEr-D of `candidate` against `references`, in `[0, 10]`.
pub fn cider_d<S: AsRef<str>>(candidate: &str, references: &[S], idf: &IdfTable, sigma: f64) -> f64 {
    cider(
        candidate,
        references,
        idf,
        CiderParams {
            variant: CiderVariant::CiderD,
            sigma,
        },
    )
}

pub fn cider<S: AsRef<str>>(
    candidate: &str,
    references: &[S],
    idf: &IdfTable,
    params: CiderParams,
) -> f64 {
    let cand = WeightedProfile::from_text(candidate, idf);
    let refs: Vec<WeightedProfile> = references
        .iter()
        .map(|r| WeightedProfile::from_text(r.as_ref(), idf))
        .collect();
    cider_weighted(&cand, &refs, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_counts() {
        let p = NGramProfile::from_text("a b a b a");
        assert_eq!(p.len, 5);
        assert_eq!(p.counts[0]["a"], 3);
        assert_eq!(p.counts[1]["a b"], 2);
        assert_eq!(p.counts[1]["b a"], 2);
        for n in 1..=MAX_N {
            let total: u32 = p.counts[n - 1].values().sum();
            assert_eq!(total as usize, (p.len + 1).saturating_sub(n));
        }
        assert!(NGramProfile::from_text("x y").counts[2].is_empty());
    }

    #[test]
    fn idf_direct_counts() {
        let idf = build_idf(&["a dog", "a cat"]).unwrap();
        assert_eq!(idf.df(1, "a"), 2);
        assert_eq!(idf.df(1, "dog"), 1);
        assert_eq!(idf.df(2, "a dog"), 1);
        assert_eq!(idf.doc_count, 2);
        // df counts documents, not occurrences
        let idf = build_idf(&["a a a"]).unwrap();
        assert_eq!(idf.df(1, "a"), 1);
        assert!(matches!(build_idf::<&str>(&[]), Err(FilterError::EmptyCorpus)));
    }

    #[test]
    fn unseen_ngram_gets_df_one() {
        let idf = build_idf(&["a dog", "a cat", "a cow"]).unwrap();
        assert!((idf.idf(1, "zebra") - 3f64.ln()).abs() < 1e-15);
        assert!((idf.idf(1, "dog") - 3f64.ln()).abs() < 1e-15);
        assert_eq!(idf.idf(1, "a"), 0.0);
    }

    #[test]
    fn self_match_scores_ten() {
        let corpus = [
            "a man rides a wave on a surfboard",
            "two dogs play in the snow",
            "a plate of food on a table",
        ];
        let idf = build_idf(&corpus).unwrap();
        let s = corpus[0];
        let score = cider_d(s, &[s], &idf, DEFAULT_SIGMA);
        assert!((score - 10.0).abs() < 1e-9, "{score}");
    }

    #[test]
    fn disjoint_scores_zero() {
        let idf = build_idf(&["a red bus", "green kite sky"]).unwrap();
        assert_eq!(cider_d("green kite sky", &["a red bus"], &idf, 6.0), 0.0);
        assert_eq!(cider_d("", &["a red bus"], &idf, 6.0), 0.0);
    }

    #[test]
    fn repetition_never_helps() {
        let idf = build_idf(&["a dog runs in a park", "a cat sleeps", "birds fly"]).unwrap();
        let refs = ["a dog runs in a park"];
        let once = cider_d("dog park", &refs, &idf, 6.0);
        let twice = cider_d("dog park dog park", &refs, &idf, 6.0);
        assert!(twice <= once);
    }

    #[test]
    fn plain_variant_ignores_length() {
        let idf = build_idf(&["a dog runs", "a cat sleeps"]).unwrap();
        let params = CiderParams {
            variant: CiderVariant::Plain,
            sigma: DEFAULT_SIGMA,
        };
        let s = cider("dog runs", &["dog runs dog runs dog runs dog runs dog runs"], &idf, params);
        // unigrams align exactly; bigrams (5, 4) against (1, 0); no 3- or 4-grams
        let expected = 10.0 * (1.0 + 5.0 / 41f64.sqrt()) / 4.0;
        assert!((s - expected).abs() < 1e-9, "{s} vs {expected}");
        let d = cider_d("dog runs", &["dog runs dog runs dog runs dog runs dog runs"], &idf, 6.0);
        assert!(d < s);
    }
}
