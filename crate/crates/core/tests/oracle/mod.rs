//! Direct-formula reference implementations, std only.
//!
//! Written to be obviously correct rather than fast: linear scans over
//! vectors of n-grams, no shared helpers with the library.

#![allow(dead_code, clippy::needless_range_loop)]

pub fn tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| if c.is_ascii_lowercase() || c.is_ascii_digit() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().map(String::from).collect()
}

pub fn ngrams(toks: &[String], n: usize) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut i = 0;
    while i + n <= toks.len() {
        out.push(toks[i..i + n].to_vec());
        i += 1;
    }
    out
}

/// (gram, count) pairs in first-seen order.
pub fn count(grams: &[Vec<String>]) -> Vec<(Vec<String>, usize)> {
    let mut out: Vec<(Vec<String>, usize)> = Vec::new();
    for g in grams {
        match out.iter_mut().find(|(h, _)| h == g) {
            Some((_, c)) => *c += 1,
            None => out.push((g.clone(), 1)),
        }
    }
    out
}

fn lookup(counts: &[(Vec<String>, usize)], g: &[String]) -> usize {
    counts.iter().find(|(h, _)| h == g).map(|(_, c)| *c).unwrap_or(0)
}

/// Number of corpus sentences containing `g` at least once.
fn doc_freq(corpus: &[Vec<String>], g: &[String]) -> usize {
    corpus
        .iter()
        .filter(|doc| ngrams(doc, g.len()).iter().any(|h| h == g))
        .count()
}

fn tfidf(counts: &[(Vec<String>, usize)], corpus: &[Vec<String>]) -> Vec<(Vec<String>, f64)> {
    let m = corpus.len() as f64;
    counts
        .iter()
        .map(|(g, c)| {
            let df = doc_freq(corpus, g).max(1) as f64;
            (g.clone(), *c as f64 * (m.ln() - df.ln()))
        })
        .collect()
}

/// CIDEr-D (`clipped = true`, Gaussian penalty with `sigma`) or plain CIDEr.
pub fn cider(candidate: &str, references: &[&str], corpus: &[&str], sigma: f64, clipped: bool) -> f64 {
    let corpus: Vec<Vec<String>> = corpus.iter().map(|s| tokens(s)).collect();
    let c = tokens(candidate);
    if c.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for r in references {
        let r = tokens(r);
        let delta = c.len() as f64 - r.len() as f64;
        let penalty = if clipped { (-(delta * delta) / (2.0 * sigma * sigma)).exp() } else { 1.0 };
        let mut per_ref = 0.0;
        for n in 1..=4 {
            let vc = tfidf(&count(&ngrams(&c, n)), &corpus);
            let vr = tfidf(&count(&ngrams(&r, n)), &corpus);
            let mut num = 0.0;
            for (g, wc) in &vc {
                if let Some((_, wr)) = vr.iter().find(|(h, _)| h == g) {
                    num += if clipped { wc.min(*wr) * wr } else { wc * wr };
                }
            }
            let nc: f64 = vc.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let nr: f64 = vr.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
            let sim = if nc > 0.0 && nr > 0.0 { num / (nc * nr) } else { 0.0 };
            per_ref += sim * penalty;
        }
        total += per_ref / 4.0;
    }
    total / references.len() as f64 * 10.0
}

/// Corpus BLEU-1..4 with clipped counts, closest reference length and brevity penalty.
pub fn bleu(candidates: &[&str], references: &[Vec<&str>]) -> [f64; 4] {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokens(cand);
        let rs: Vec<Vec<String>> = refs.iter().map(|r| tokens(r)).collect();
        c_len += c.len();
        let mut best = usize::MAX;
        let mut best_diff = usize::MAX;
        for r in &rs {
            let diff = r.len().abs_diff(c.len());
            if diff < best_diff || (diff == best_diff && r.len() < best) {
                best = r.len();
                best_diff = diff;
            }
        }
        r_len += best;
        for n in 1..=4 {
            let cc = count(&ngrams(&c, n));
            for (g, k) in &cc {
                let max_ref = rs.iter().map(|r| lookup(&count(&ngrams(r, n)), g)).max().unwrap_or(0);
                matched[n - 1] += (*k).min(max_ref);
            }
            total[n - 1] += ngrams(&c, n).len();
        }
    }
    let bp = if c_len == 0 {
        0.0
    } else if c_len < r_len {
        (1.0 - r_len as f64 / c_len as f64).exp()
    } else {
        1.0
    };
    let mut out = [0.0; 4];
    for n in 0..4 {
        let mut prod = 1.0;
        let mut zero = false;
        for i in 0..=n {
            if matched[i] == 0 || total[i] == 0 {
                zero = true;
            } else {
                prod *= matched[i] as f64 / total[i] as f64;
            }
        }
        out[n] = if zero { 0.0 } else { bp * prod.powf(1.0 / (n + 1) as f64) };
    }
    out
}

fn lcs(a: &[String], b: &[String]) -> usize {
    // full table, filled from the end
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { t[i + 1][j + 1] + 1 } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

/// Sentence-averaged ROUGE-L, best reference per sentence, beta = 1.2.
pub fn rouge_l(candidates: &[&str], references: &[Vec<&str>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let c = tokens(cand);
        let mut best = 0.0f64;
        for r in refs {
            let r = tokens(r);
            let l = lcs(&c, &r) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / c.len() as f64;
            let rec = l / r.len() as f64;
            best = best.max((1.0 + beta2) * p * rec / (rec + beta2 * p));
        }
        sum += best;
    }
    sum / candidates.len() as f64
}

/// Image-anchored InfoNCE loss from the definition.
pub fn infonce(q: &[Vec<f64>], k: &[Vec<f64>], tau: f64) -> f64 {
    let b = q.len();
    let mut loss = 0.0;
    for i in 0..b {
        let logits: Vec<f64> = (0..b)
            .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum::<f64>() / tau)
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        loss += -(logits[i].exp() / denom).ln();
    }
    loss / b as f64
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

/// Full stable sort by score descending; returns (row, score).
pub fn ranking(query: &[f32], rows: &[Vec<f32>]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| (i, dot(query, r).clamp(-1.0, 1.0)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    scored
}

pub fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..xs.len() {
        if xs[i] > xs[best] {
            best = i;
        }
    }
    best
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}
