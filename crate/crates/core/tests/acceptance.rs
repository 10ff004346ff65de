//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Runs without the libtest harness so the lines always print.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;
mod oracle;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rapsg::clip_guidance::{infonce_loss, Direction, GuidanceBatch};
use rapsg::embedding_store::{decode_store, EmbeddingStore};
use rapsg::fluency_filter::{build_idf, cider_d, select_best, CiderParams};
use rapsg::metrics::{bleu, rouge_l};
use rapsg::pipeline::{run_pipeline, DatasetRecord, ImageRecord, RunManifest, OUTPUT_FILES};
use rapsg::retrieval::top_k_for_image;

type Outcome = Result<String, String>;
type Check = fn() -> Outcome;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

const WORDS: [&str; 24] = [
    "a", "man", "woman", "dog", "rides", "runs", "on", "the", "red", "blue", "skateboard", "grass",
    "street", "ball", "with", "in", "park", "two", "sits", "bench", "near", "water", "small", "large",
];

fn random_sentence(rng: &mut ChaCha8Rng, max_len: usize) -> String {
    let len = rng.random_range(1..=max_len);
    (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect::<Vec<_>>().join(" ")
}

/// A candidate that shares some structure with `reference`.
fn perturb(rng: &mut ChaCha8Rng, reference: &str, max_len: usize) -> String {
    let mut toks: Vec<&str> = reference.split(' ').collect();
    for _ in 0..rng.random_range(0..4) {
        match rng.random_range(0..3) {
            0 if toks.len() > 1 => {
                let i = rng.random_range(0..toks.len());
                toks.remove(i);
            }
            1 if toks.len() < max_len => {
                let i = rng.random_range(0..=toks.len());
                toks.insert(i, WORDS[rng.random_range(0..WORDS.len())]);
            }
            _ => {
                let i = rng.random_range(0..toks.len());
                toks[i] = WORDS[rng.random_range(0..WORDS.len())];
            }
        }
    }
    toks.join(" ")
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()) || (a - b).abs() < 1e-12
}

fn cider_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let refs: Vec<String> = (0..100).map(|_| random_sentence(&mut rng, 20)).collect();
    let cands: Vec<String> = refs
        .iter()
        .map(|r| if rng.random_bool(0.7) { perturb(&mut rng, r, 20) } else { random_sentence(&mut rng, 20) })
        .collect();
    let corpus: Vec<&str> = refs.iter().map(String::as_str).collect();

    let start = Instant::now();
    let idf = build_idf(&corpus).unwrap();
    let got: Vec<f64> = cands.iter().zip(&refs).map(|(c, r)| cider_d(c, &[r.as_str()], &idf, 6.0)).collect();
    let elapsed = start.elapsed();

    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for ((c, r), g) in cands.iter().zip(&refs).zip(&got) {
        let want = oracle::cider(c, &[r], &corpus, 6.0, true);
        ensure!(close(*g, want, 1e-9), "{c:?} vs {r:?}: got {g}, oracle {want}");
        worst = worst.max(oracle::rel_err(*g, want));
        nonzero += usize::from(want > 0.0);
    }

    let mut self_checked = 0;
    for s in &refs {
        let distinct: HashSet<&str> = s.split(' ').collect();
        if distinct.len() < 4 {
            continue;
        }
        let v = cider_d(s, &[s.as_str()], &idf, 6.0);
        ensure!((v - 10.0).abs() < 1e-9, "cider_d(s, [s]) = {v} for {s:?}");
        self_checked += 1;
    }
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!(
        "100 pairs ({nonzero} non-zero), max rel err {worst:.1e}; {self_checked} self-matches = 10; {elapsed:.2?}"
    ))
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect()
}

fn retrieval_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (n, d, queries, k) = (10_000, 512, 50, 16);
    let rows = unit_rows(&mut rng, n, d);
    let qs = unit_rows(&mut rng, queries, d);
    let descs = EmbeddingStore::from_rows(rows.iter().enumerate().map(|(i, r)| (format!("d{i}"), r.clone())), true).unwrap();
    let images = EmbeddingStore::from_rows(qs.iter().enumerate().map(|(i, r)| (format!("q{i}"), r.clone())), true).unwrap();

    let start = Instant::now();
    let results: Vec<_> = (0..queries)
        .map(|i| top_k_for_image(&format!("q{i}"), &images, &descs, k).unwrap())
        .collect();
    let elapsed = start.elapsed();

    for (q, topk) in qs.iter().zip(&results) {
        let want = oracle::ranking(q, &rows);
        ensure!(topk.entries.len() == k, "{} entries", topk.entries.len());
        for (got, (row, score)) in topk.entries.iter().zip(&want[..k]) {
            ensure!(got.desc_id == format!("d{row}"), "{}: id {} vs d{row}", topk.image_id, got.desc_id);
            ensure!(got.score == *score, "{}: score {} vs {score}", topk.image_id, got.score);
        }
    }
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    Ok(format!("{queries} queries over {n} x {d}, ids and scores identical; {elapsed:.2?}"))
}

fn fixture_run(dir: &Path) -> Vec<ImageRecord> {
    let report = run_pipeline(&common::fixture_config(dir)).unwrap();
    report
        .records
        .into_iter()
        .map(|r| match r {
            DatasetRecord::Ok(rec) => rec,
            DatasetRecord::Error(e) => panic!("{} failed: {}", e.image_id, e.message),
        })
        .collect()
}

fn grouping_partition_law() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::fixture_config(tmp.path());
    ensure!(cfg.k == 16 && cfg.m == 4, "fixture config has k = {}, m = {}", cfg.k, cfg.m);
    let records = fixture_run(tmp.path());
    let c1 = decode_store(&std::fs::read(tmp.path().join("c1_embeddings.raps")).unwrap()).unwrap();
    let sentences = decode_store(&std::fs::read(tmp.path().join("sentence_embeddings.raps")).unwrap()).unwrap();

    for rec in &records {
        let topk: Vec<&str> = rec.topk.iter().map(|e| e.desc_id.as_str()).collect();
        ensure!(topk.len() == 16, "{}: {} retrieved", rec.image_id, topk.len());
        ensure!(rec.head == topk[..4], "{}: head is not ranks 1-4", rec.image_id);
        ensure!(rec.tail_groups.len() == 3, "{}: {} tail groups", rec.image_id, rec.tail_groups.len());
        let mut seen: Vec<&str> = rec.head.iter().map(String::as_str).collect();
        for g in &rec.tail_groups {
            ensure!(g.len() == 4, "{}: group of {}", rec.image_id, g.len());
            seen.extend(g.iter().map(String::as_str));
        }
        let mut a = seen.clone();
        let mut b = topk.clone();
        a.sort_unstable();
        b.sort_unstable();
        ensure!(a == b, "{}: groups do not tile the top-k set", rec.image_id);

        let anchor = c1.get(&rec.image_id).unwrap();
        let sim = |id: &str| oracle::dot(anchor, sentences.get(id).unwrap());
        for pair in rec.tail_groups.windows(2) {
            let lo = pair[0].iter().map(|id| sim(id)).fold(f64::INFINITY, f64::min);
            let hi = pair[1].iter().map(|id| sim(id)).fold(f64::NEG_INFINITY, f64::max);
            ensure!(lo >= hi, "{}: block similarity not monotone ({lo} < {hi})", rec.image_id);
        }
    }
    Ok(format!("{} images: head + 3 x 4 tiles top-16, blocks monotone", records.len()))
}

fn candidate_count_law() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let records = fixture_run(tmp.path());
    ensure!(records.len() == 20, "{} records", records.len());
    for rec in &records {
        ensure!(rec.candidates.len() == 5, "{}: {} candidates", rec.image_id, rec.candidates.len());
    }
    Ok("20 images x 5 candidates (k/m + 1)".into())
}

fn to_vecs(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Array2<f64> {
    let rows = unit_rows(rng, b, d);
    Array2::from_shape_fn((b, d), |(i, j)| f64::from(rows[i][j]))
}

fn infonce_correctness() -> Outcome {
    let tau = 0.07;
    let start = Instant::now();

    let one = GuidanceBatch::new(ndarray::array![[0.6, 0.8]], ndarray::array![[0.0, 1.0]], tau).unwrap();
    let l1 = infonce_loss(&one, Direction::ImageToText).loss;
    ensure!(l1 == 0.0, "B = 1 loss {l1}");

    for b in [2usize, 5, 16] {
        let q = random_unit(&mut ChaCha8Rng::seed_from_u64(b as u64), b, 8);
        let k = Array2::from_shape_fn((b, 8), |(_, j)| if j == 0 { 1.0 } else { 0.0 });
        let l = infonce_loss(&GuidanceBatch::new(q, k, tau).unwrap(), Direction::ImageToText).loss;
        ensure!(close(l, (b as f64).ln(), 1e-12), "identical keys, B = {b}: {l} vs ln B");
    }

    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    for (b, d) in [(2, 3), (4, 8), (8, 32), (16, 64)] {
        let q = random_unit(&mut rng, b, d);
        let k = random_unit(&mut rng, b, d);
        let out = infonce_loss(&GuidanceBatch::new(q.clone(), k.clone(), tau).unwrap(), Direction::ImageToText);
        let (qv, kv) = (to_vecs(&q), to_vecs(&k));
        let want = oracle::infonce(&qv, &kv, tau);
        ensure!(close(out.loss, want, 1e-12), "loss {} vs oracle {want}", out.loss);

        for (which, analytic) in [(0, &out.grad_images), (1, &out.grad_texts)] {
            let mut numeric = Array2::<f64>::zeros((b, d));
            for i in 0..b {
                for j in 0..d {
                    let (mut qp, mut kp) = (qv.clone(), kv.clone());
                    let (mut qm, mut km) = (qv.clone(), kv.clone());
                    if which == 0 {
                        qp[i][j] += h;
                        qm[i][j] -= h;
                    } else {
                        kp[i][j] += h;
                        km[i][j] -= h;
                    }
                    numeric[[i, j]] = (oracle::infonce(&qp, &kp, tau) - oracle::infonce(&qm, &km, tau)) / (2.0 * h);
                }
            }
            // entries far below the gradient's scale are compared against that scale
            let scale = numeric.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            for (a, n) in analytic.iter().zip(numeric.iter()) {
                let err = (a - n).abs() / n.abs().max(1e-3 * scale);
                worst = worst.max(err);
                ensure!(err <= 1e-4, "B = {b}, d = {d}: analytic {a} vs numeric {n}");
            }
        }
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("B=1 -> 0, identical keys -> ln B, max gradient rel err {worst:.1e}; {elapsed:.2?}"))
}

fn end_to_end_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let conf = common::fixture_dir().join("fixture.conf");
    let start = Instant::now();
    for name in ["a", "b"] {
        let out = Command::new(env!("CARGO_BIN_EXE_rapsg"))
            .args(["run", "--config", conf.to_str().unwrap(), "--output-dir"])
            .arg(tmp.path().join(name))
            .env_remove("RAPSG_BACKEND_URL")
            .output()
            .unwrap();
        ensure!(out.status.success(), "run failed: {}", String::from_utf8_lossy(&out.stderr));
    }
    let elapsed = start.elapsed();
    for name in OUTPUT_FILES {
        let a = std::fs::read(tmp.path().join("a").join(name)).unwrap();
        let b = std::fs::read(tmp.path().join("b").join(name)).unwrap();
        ensure!(a == b, "{name} differs between runs");
    }
    let ma = RunManifest::load(&tmp.path().join("a")).unwrap();
    let mb = RunManifest::load(&tmp.path().join("b")).unwrap();
    ensure!(ma.outputs == mb.outputs, "manifest output digests differ");
    ensure!(ma.config_digest == mb.config_digest, "config digests differ");
    ensure!(ma.inputs == mb.inputs, "input digests differ");
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("{} output files byte-identical, digests match; {elapsed:.2?} for two runs", OUTPUT_FILES.len()))
}

fn metric_sanity() -> Outcome {
    let preds: Vec<serde_json::Value> = rapsg::pipeline::read_jsonl(&common::fixture_dir().join("predictions.jsonl")).unwrap();
    let corpus: Vec<String> = preds.iter().map(|p| p["prediction"].as_str().unwrap().to_owned()).collect();
    let corpus: Vec<&str> = corpus.iter().map(String::as_str).collect();
    let refs: Vec<Vec<&str>> = corpus.iter().map(|s| vec![*s]).collect();
    let b = bleu(&corpus, &refs).unwrap();
    ensure!(b.iter().all(|&x| (x - 1.0).abs() < 1e-12), "identical corpora BLEU {b:?}");
    let r = rouge_l(&corpus, &refs).unwrap();
    ensure!((r - 1.0).abs() < 1e-12, "identical corpora ROUGE-L {r}");

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut cands = Vec::new();
    let mut references = Vec::new();
    for _ in 0..50 {
        let base = random_sentence(&mut rng, 15);
        let n_refs = rng.random_range(1..=3);
        let rs: Vec<String> = (0..n_refs).map(|_| perturb(&mut rng, &base, 15)).collect();
        cands.push(perturb(&mut rng, &base, 15));
        references.push(rs);
    }
    let cand_refs: Vec<&str> = cands.iter().map(String::as_str).collect();
    let ref_refs: Vec<Vec<&str>> = references.iter().map(|r| r.iter().map(String::as_str).collect()).collect();
    let got = bleu(&cand_refs, &ref_refs).unwrap();
    let want = oracle::bleu(&cand_refs, &ref_refs);
    for n in 0..4 {
        ensure!(close(got[n], want[n], 1e-9), "BLEU-{}: {} vs oracle {}", n + 1, got[n], want[n]);
    }
    let got_r = rouge_l(&cand_refs, &ref_refs).unwrap();
    let want_r = oracle::rouge_l(&cand_refs, &ref_refs);
    ensure!(close(got_r, want_r, 1e-9), "ROUGE-L {got_r} vs oracle {want_r}");
    Ok(format!(
        "identical corpora -> 1.0; 50 random pairs match oracle (BLEU-4 {:.4}, ROUGE-L {:.4})",
        got[3], got_r
    ))
}

fn filter_argmax_stability() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let records = fixture_run(tmp.path());
    let preds = rapsg::pipeline::Predictions::load(&common::fixture_dir().join("predictions.jsonl")).unwrap();
    let corpus = preds.texts();
    let idf = build_idf(&corpus).unwrap();
    let params = CiderParams::default();

    for rec in &records {
        let prediction = preds.get(&rec.image_id).unwrap();
        let filter = rec.filter.as_ref().unwrap();
        let texts: Vec<&str> = rec.candidates.iter().map(|c| c.text.as_str()).collect();
        let oracle_scores: Vec<f64> = texts.iter().map(|t| oracle::cider(t, &[prediction], &corpus, 6.0, true)).collect();
        for (g, w) in filter.scores.iter().zip(&oracle_scores) {
            ensure!(close(*g, *w, 1e-9), "{}: score {g} vs oracle {w}", rec.image_id);
        }
        let want = oracle::argmax_first(&oracle_scores);
        ensure!(filter.selected_index == want, "{}: selected {} vs oracle {want}", rec.image_id, filter.selected_index);

        let mut with_pred = vec![prediction];
        with_pred.extend(&texts);
        let r = select_best(&rec.image_id, &with_pred, prediction, &idf, params).unwrap();
        ensure!(r.selected_index == 0, "{}: prediction at 0 not selected", rec.image_id);

        let tied = [texts[want], texts[want], texts[want]];
        let r = select_best(&rec.image_id, &tied, prediction, &idf, params).unwrap();
        ensure!(r.selected_index == 0, "{}: tie resolved to {}", rec.image_id, r.selected_index);
        let mut shifted = vec![texts[(want + 1) % texts.len()]];
        shifted.extend([texts[want], texts[want]]);
        let r = select_best(&rec.image_id, &shifted, prediction, &idf, params).unwrap();
        ensure!(r.selected_index == 1, "{}: tie after a weaker candidate resolved to {}", rec.image_id, r.selected_index);
    }
    Ok(format!("{} images: argmax and scores match oracle; prediction-first and ties resolve low", records.len()))
}

fn main() {
    let criteria: [(&str, Check); 8] = [
        ("CIDEr-D oracle equivalence", cider_oracle_equivalence),
        ("retrieval exactness", retrieval_exactness),
        ("grouping partition law (k=16, m=4)", grouping_partition_law),
        ("candidate count law", candidate_count_law),
        ("InfoNCE correctness", infonce_correctness),
        ("end-to-end determinism", end_to_end_determinism),
        ("metric sanity", metric_sanity),
        ("filter argmax stability", filter_argmax_stability),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
