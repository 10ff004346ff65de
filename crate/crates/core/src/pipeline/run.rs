use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{BackendChoice, PipelineConfig};
use super::manifest::{now_ms, sha256_file, FileDigest, ImageStatus, RunManifest};
use super::records::{
    read_jsonl, to_jsonl, write_atomic, DatasetRecord, FilterOutcome, ImageFailure, ImageRecord,
    Predictions, Stage,
};
use super::PipelineError;
use crate::embedding_store::{
    encode_store, l2_normalize, overlap_filter, read_exclusion_list, DescriptionCatalog,
    EmbeddingStore,
};
use crate::fluency_filter::{select_best, CiderParams, IdfTable};
use crate::grouping::{dedup_texts, partition_remainder, select_head};
use crate::retrieval::{top_k_batch, RetrievalError, TopK, TopKRecord};
use crate::sentence_embedder::{embed_texts, HashEmbedder, SentenceEmbedder};
use crate::summarization::{
    refine, summarize_group, Candidate, HttpBackend, Provenance, RequestKind,
    SummarizationRequest, SummarizeError, SummarizerBackend, ExtractiveFallback, RetryPolicy,
};

/// Files written to the output directory, besides the manifest.
pub const OUTPUT_FILES: [&str; 7] = [
    "dataset.jsonl",
    "topk.jsonl",
    "groups.jsonl",
    "candidates.jsonl",
    "filter.jsonl",
    "c1_embeddings.raps",
    "sentence_embeddings.raps",
];

#[derive(Debug, Clone)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub records: Vec<DatasetRecord>,
    /// Images computed by this invocation.
    pub executed: Vec<String>,
}

impl RunReport {
    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| !r.is_ok()).count()
    }
}

pub fn backend_from_config(config: &PipelineConfig) -> Result<Box<dyn SummarizerBackend>, PipelineError> {
    Ok(match &config.backend {
        BackendChoice::Fallback => Box::new(ExtractiveFallback),
        BackendChoice::Service(url) => Box::new(
            HttpBackend::new(url.clone(), RetryPolicy::default())
                .map_err(|e| PipelineError::Backend(e.to_string()))?,
        ),
    })
}

pub fn embedder_from_config(config: &PipelineConfig) -> Result<Box<dyn SentenceEmbedder>, PipelineError> {
    match config.sentence_embedder.as_str() {
        "hash" => Ok(Box::new(HashEmbedder::new(config.sentence_dim))),
        other => Err(PipelineError::Config(format!("unknown sentence_embedder {other:?}"))),
    }
}

/// Per-request seed derived from the run seed, image and candidate slot.
pub fn request_seed(seed: u64, image_id: &str, slot: usize) -> u64 {
    let d = Sha256::digest(format!("{seed}/{image_id}/{slot}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

struct Inputs {
    images: EmbeddingStore,
    descriptions: EmbeddingStore,
    catalog: DescriptionCatalog,
    predictions: Option<Predictions>,
    idf: Option<IdfTable>,
    image_ids: Vec<String>,
    digests: BTreeMap<String, FileDigest>,
}

fn required<'a>(p: &'a Option<PathBuf>, name: &str) -> Result<&'a Path, PipelineError> {
    p.as_deref()
        .ok_or_else(|| PipelineError::Config(format!("{name} is required")))
}

fn normalized(store: EmbeddingStore) -> Result<EmbeddingStore, PipelineError> {
    if store.is_normalized() {
        Ok(store)
    } else {
        Ok(l2_normalize(&store)?)
    }
}

fn load_inputs(config: &PipelineConfig) -> Result<Inputs, PipelineError> {
    let mut digests = BTreeMap::new();
    let mut digest = |name: &str, path: &Path| -> Result<(), PipelineError> {
        digests.insert(
            name.to_owned(),
            FileDigest {
                path: path.display().to_string(),
                sha256: sha256_file(path).map_err(|e| PipelineError::Input(e.to_string()))?,
            },
        );
        Ok(())
    };

    let image_path = required(&config.image_store, "image_store")?;
    let desc_path = required(&config.description_store, "description_store")?;
    let catalog_path = required(&config.catalog, "catalog")?;
    digest("image_store", image_path)?;
    digest("description_store", desc_path)?;
    digest("catalog", catalog_path)?;

    let images = normalized(EmbeddingStore::load(image_path)?)?;
    let descriptions = normalized(EmbeddingStore::load(desc_path)?)?;
    if images.dim() != descriptions.dim() {
        return Err(PipelineError::Input(format!(
            "image store dim {} differs from description store dim {}",
            images.dim(),
            descriptions.dim()
        )));
    }

    let mut catalog = DescriptionCatalog::load(catalog_path)?;
    catalog.check_against(&descriptions)?;
    if let Some(p) = &config.exclusions {
        digest("exclusions", p)?;
        let excluded = read_exclusion_list(p)?;
        catalog = overlap_filter(&catalog, &excluded);
    }
    // retrieval only sees descriptions that survived the catalog filter
    let descriptions = descriptions.retain(|id| catalog.contains(id))?;
    if descriptions.is_empty() {
        return Err(PipelineError::Input("no descriptions left after filtering".into()));
    }

    let predictions = match &config.predictions {
        Some(p) => {
            digest("predictions", p)?;
            Some(Predictions::load(p)?)
        }
        None => None,
    };
    let idf = match &predictions {
        Some(p) if !p.records.is_empty() => Some(
            IdfTable::build(&p.texts()).map_err(|e| PipelineError::Input(e.to_string()))?,
        ),
        _ => None,
    };

    let image_ids = match &config.image_list {
        Some(p) => {
            digest("image_list", p)?;
            let text = std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Input(format!("{}: {e}", p.display())))?;
            let ids: Vec<String> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_owned)
                .collect();
            let mut seen = HashSet::new();
            if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
                return Err(PipelineError::Input(format!("image {dup:?} listed twice")));
            }
            ids
        }
        None => images.ids().to_vec(),
    };

    Ok(Inputs {
        images,
        descriptions,
        catalog,
        predictions,
        idf,
        image_ids,
        digests,
    })
}

struct Ctx<'a> {
    config: &'a PipelineConfig,
    inputs: &'a Inputs,
    backend: &'a dyn SummarizerBackend,
    embedder: &'a dyn SentenceEmbedder,
    sentences: &'a EmbeddingStore,
    cider: CiderParams,
}

#[derive(Default, Clone, Copy)]
struct StageTimes([Duration; 5]);

impl StageTimes {
    fn add(&mut self, stage: Stage, d: Duration) {
        self.0[stage as usize] += d;
    }

    fn merge(mut self, other: StageTimes) -> Self {
        for (a, b) in self.0.iter_mut().zip(other.0) {
            *a += b;
        }
        self
    }
}

struct Failure {
    stage: Stage,
    message: String,
    backend: bool,
}

impl Failure {
    fn new(stage: Stage, e: impl std::fmt::Display) -> Self {
        Self {
            stage,
            message: e.to_string(),
            backend: false,
        }
    }

    fn summarizer(stage: Stage, e: SummarizeError) -> Self {
        Self {
            stage,
            backend: matches!(e, SummarizeError::Backend { .. }),
            message: e.to_string(),
        }
    }
}

fn texts<'a>(catalog: &'a DescriptionCatalog, ids: &'a [String]) -> impl Iterator<Item = &'a str> {
    // ids come from a catalog-filtered store, so the lookup cannot miss
    ids.iter().map(move |id| catalog.text(id).expect("retrieved id is in catalog"))
}

fn process_image(ctx: &Ctx<'_>, topk: &TopK, times: &mut StageTimes) -> Result<ImageRecord, Failure> {
    let cfg = ctx.config;
    let catalog = &ctx.inputs.catalog;
    let image_id = topk.image_id.as_str();
    let backend_name = ctx.backend.name();

    let t = Instant::now();
    let head = select_head(topk, cfg.m).map_err(|e| Failure::new(Stage::Group, e))?;
    times.add(Stage::Group, t.elapsed());

    let t = Instant::now();
    let seed = request_seed(cfg.seed, image_id, 0);
    let req = SummarizationRequest::summarize(
        format!("{image_id}/c1"),
        dedup_texts(texts(catalog, &head)),
        seed,
        cfg.max_tokens,
    );
    let c1 = summarize_group(&req, ctx.backend).map_err(|e| Failure::summarizer(Stage::Summarize, e))?;
    times.add(Stage::Summarize, t.elapsed());
    let mut candidates = vec![Candidate {
        text: c1,
        provenance: Provenance {
            groups: vec![0],
            kind: RequestKind::Summarize,
            backend: backend_name.clone(),
            seed,
        },
    }];

    let t = Instant::now();
    let c1_embedding = ctx.embedder.embed(&candidates[0].text);
    let plan = partition_remainder(topk, &head, &c1_embedding, ctx.sentences)
        .map_err(|e| Failure::new(Stage::Group, e))?;
    times.add(Stage::Group, t.elapsed());

    let t = Instant::now();
    for (g, group) in plan.tail_groups.iter().enumerate() {
        let slot = g + 1;
        let seed = request_seed(cfg.seed, image_id, slot);
        let req = SummarizationRequest::summarize(
            format!("{image_id}/c{}", slot + 1),
            dedup_texts(texts(catalog, group)),
            seed,
            cfg.max_tokens,
        );
        let text = summarize_group(&req, ctx.backend).map_err(|e| Failure::summarizer(Stage::Summarize, e))?;
        candidates.push(Candidate {
            text,
            provenance: Provenance {
                groups: vec![slot],
                kind: RequestKind::Summarize,
                backend: backend_name.clone(),
                seed,
            },
        });
    }
    times.add(Stage::Summarize, t.elapsed());

    let prediction = ctx.inputs.predictions.as_ref().and_then(|p| p.get(image_id));
    if cfg.stage2 {
        let t = Instant::now();
        let prediction = prediction.ok_or_else(|| Failure::new(Stage::Refine, "no prediction for this image"))?;
        let slot = plan.n + 1;
        let seed = request_seed(cfg.seed, image_id, slot);
        let topk_ids: Vec<String> = topk.ids().map(str::to_owned).collect();
        let req = SummarizationRequest::refine(
            format!("{image_id}/c{}", slot + 1),
            prediction,
            texts(catalog, &topk_ids).map(str::to_owned).collect(),
            seed,
            cfg.max_tokens,
        );
        let text = refine(&req, ctx.backend).map_err(|e| Failure::summarizer(Stage::Refine, e))?;
        candidates.push(Candidate {
            text,
            provenance: Provenance {
                groups: (0..=plan.n).collect(),
                kind: RequestKind::Refine,
                backend: backend_name.clone(),
                seed,
            },
        });
        times.add(Stage::Refine, t.elapsed());
    }

    let filter = match (prediction, &ctx.inputs.idf) {
        (Some(prediction), Some(idf)) => {
            let t = Instant::now();
            let texts: Vec<&str> = candidates.iter().map(|c| c.text.as_str()).collect();
            let r = select_best(image_id, &texts, prediction, idf, ctx.cider)
                .map_err(|e| Failure::new(Stage::Filter, e))?;
            times.add(Stage::Filter, t.elapsed());
            Some(FilterOutcome {
                scores: r.scores,
                selected_index: r.selected_index,
                selected_sentence: r.selected_sentence,
            })
        }
        _ => None,
    };

    Ok(ImageRecord {
        image_id: image_id.to_owned(),
        topk: topk.entries.clone(),
        head: plan.head,
        tail_groups: plan.tail_groups,
        candidates,
        filter,
    })
}

/// Sentence embeddings for every description in `topks`, in catalog order.
fn sentence_store<'a, I>(
    catalog: &DescriptionCatalog,
    embedder: &dyn SentenceEmbedder,
    topk_ids: I,
) -> Result<EmbeddingStore, PipelineError>
where
    I: IntoIterator<Item = &'a str>,
{
    let wanted: HashSet<&str> = topk_ids.into_iter().collect();
    let items = catalog
        .entries()
        .iter()
        .filter(|e| wanted.contains(e.id.as_str()))
        .map(|e| (e.id.as_str(), e.text.as_str()));
    Ok(embed_texts(embedder, items)?)
}

struct Execution {
    records: Vec<DatasetRecord>,
    first_failure: Option<PipelineError>,
    timings: BTreeMap<String, f64>,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn execute(
    config: &PipelineConfig,
    inputs: &Inputs,
    ids: &[String],
    backend: &dyn SummarizerBackend,
    embedder: &dyn SentenceEmbedder,
) -> Result<Execution, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.concurrency)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let topks: Vec<Result<TopK, RetrievalError>> =
        pool.install(|| top_k_batch(ids, &inputs.images, &inputs.descriptions, config.k));
    timings.insert("retrieve".to_owned(), ms(t.elapsed()));

    let t = Instant::now();
    let sentences = sentence_store(
        &inputs.catalog,
        embedder,
        topks.iter().flatten().flat_map(|t| t.ids()),
    )?;
    timings.insert("embed".to_owned(), ms(t.elapsed()));

    let ctx = Ctx {
        config,
        inputs,
        backend,
        embedder,
        sentences: &sentences,
        cider: config.cider_params(),
    };
    let outcomes: Vec<(DatasetRecord, Option<Failure>, StageTimes)> = pool.install(|| {
        ids.par_iter()
            .zip(topks.par_iter())
            .map(|(image_id, topk)| {
                let mut times = StageTimes::default();
                let result = match topk {
                    Ok(topk) => process_image(&ctx, topk, &mut times),
                    Err(e) => Err(Failure::new(Stage::Retrieve, e)),
                };
                match result {
                    Ok(rec) => (DatasetRecord::Ok(rec), None, times),
                    Err(f) => (
                        DatasetRecord::Error(ImageFailure {
                            image_id: image_id.clone(),
                            stage: f.stage,
                            message: f.message.clone(),
                        }),
                        Some(f),
                        times,
                    ),
                }
            })
            .collect()
    });

    let mut total = StageTimes::default();
    let mut records = Vec::with_capacity(outcomes.len());
    let mut first_failure = None;
    for (rec, failure, times) in outcomes {
        total = total.merge(times);
        if let (Some(f), None) = (failure, &first_failure) {
            first_failure = Some(PipelineError::ImageFailed {
                image_id: rec.image_id().to_owned(),
                stage: f.stage,
                message: f.message,
                backend: f.backend,
            });
        }
        records.push(rec);
    }
    for stage in [Stage::Group, Stage::Summarize, Stage::Refine, Stage::Filter] {
        timings.insert(stage.to_string(), ms(total.0[stage as usize]));
    }
    Ok(Execution {
        records,
        first_failure,
        timings,
    })
}

/// Write every output file from the dataset records; returns name -> SHA-256.
fn write_outputs(
    dir: &Path,
    inputs: &Inputs,
    embedder: &dyn SentenceEmbedder,
    records: &[DatasetRecord],
) -> Result<BTreeMap<String, String>, PipelineError> {
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
    let ok: Vec<&ImageRecord> = records
        .iter()
        .filter_map(|r| match r {
            DatasetRecord::Ok(rec) => Some(rec),
            DatasetRecord::Error(_) => None,
        })
        .collect();

    let topk: Vec<TopKRecord> = ok.iter().map(|r| r.topk_record()).collect();
    let groups: Vec<_> = ok.iter().map(|r| r.grouping_record()).collect();
    let candidates: Vec<_> = ok.iter().map(|r| r.candidate_set()).collect();
    let filter: Vec<_> = ok.iter().filter_map(|r| r.filter_result()).collect();

    let c1 = EmbeddingStore::new(
        ok.iter().map(|r| r.image_id.clone()).collect(),
        embedder.dim(),
        ok.iter().flat_map(|r| embedder.embed(&r.candidates[0].text)).collect(),
        true,
    )?;
    let sentences = sentence_store(
        &inputs.catalog,
        embedder,
        ok.iter().flat_map(|r| r.topk.iter().map(|e| e.desc_id.as_str())),
    )?;

    let files: [(&str, Vec<u8>); 7] = [
        ("dataset.jsonl", to_jsonl(records)),
        ("topk.jsonl", to_jsonl(&topk)),
        ("groups.jsonl", to_jsonl(&groups)),
        ("candidates.jsonl", to_jsonl(&candidates)),
        ("filter.jsonl", to_jsonl(&filter)),
        ("c1_embeddings.raps", encode_store(&c1)),
        ("sentence_embeddings.raps", encode_store(&sentences)),
    ];
    let mut digests = BTreeMap::new();
    for (name, bytes) in files {
        write_atomic(&dir.join(name), &bytes)?;
        digests.insert(name.to_owned(), super::manifest::sha256_bytes(&bytes));
    }
    Ok(digests)
}

fn output_dir(config: &PipelineConfig) -> Result<&Path, PipelineError> {
    required(&config.output_dir, "output_dir")
}

/// Run every stage with the backend and embedder named by the config.
pub fn run_pipeline(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let backend = backend_from_config(config)?;
    let embedder = embedder_from_config(config)?;
    run_pipeline_with(config, backend.as_ref(), embedder.as_ref())
}

pub fn run_pipeline_with(
    config: &PipelineConfig,
    backend: &dyn SummarizerBackend,
    embedder: &dyn SentenceEmbedder,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let dir = output_dir(config)?;

    let t = Instant::now();
    let inputs = load_inputs(config)?;
    let load_ms = ms(t.elapsed());

    let mut exec = execute(config, &inputs, &inputs.image_ids, backend, embedder)?;
    if config.fail_fast {
        if let Some(e) = exec.first_failure.take() {
            return Err(e);
        }
    }
    exec.timings.insert("load".to_owned(), load_ms);

    let t = Instant::now();
    let outputs = write_outputs(dir, &inputs, embedder, &exec.records)?;
    exec.timings.insert("write".to_owned(), ms(t.elapsed()));

    let manifest = RunManifest {
        tool_version: crate::VERSION.to_owned(),
        written_at_ms: now_ms(),
        config: config.snapshot(),
        config_digest: config.digest(),
        inputs: inputs.digests.clone(),
        outputs,
        stage_timings_ms: exec.timings,
        images: exec.records.iter().map(ImageStatus::from).collect(),
        resumed_images: Vec::new(),
    };
    manifest.save(dir)?;
    Ok(RunReport {
        manifest,
        executed: inputs.image_ids.clone(),
        records: exec.records,
    })
}

/// Recompute only the images that errored or are missing from a prior run.
pub fn resume(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let backend = backend_from_config(config)?;
    let embedder = embedder_from_config(config)?;
    resume_with(config, backend.as_ref(), embedder.as_ref())
}

pub fn resume_with(
    config: &PipelineConfig,
    backend: &dyn SummarizerBackend,
    embedder: &dyn SentenceEmbedder,
) -> Result<RunReport, PipelineError> {
    config.validate()?;
    let dir = output_dir(config)?;
    let mut manifest = RunManifest::load(dir)?;

    if manifest.config_digest != config.digest() {
        let changed: Vec<String> = config
            .snapshot()
            .into_iter()
            .filter(|(k, v)| manifest.config.get(k) != Some(v) && !config.is_non_determining(k))
            .map(|(k, _)| k)
            .collect();
        return Err(PipelineError::Resume(format!(
            "configuration differs from the recorded run (changed: {})",
            changed.join(", ")
        )));
    }

    let t = Instant::now();
    let inputs = load_inputs(config)?;
    let load_ms = ms(t.elapsed());
    if inputs.digests != manifest.inputs {
        return Err(PipelineError::Resume("input files changed since the recorded run".into()));
    }
    for (name, expected) in &manifest.outputs {
        let actual = sha256_file(&dir.join(name)).map_err(|e| PipelineError::Resume(e.to_string()))?;
        if &actual != expected {
            return Err(PipelineError::Resume(format!("output {name} was modified")));
        }
    }

    let previous: Vec<DatasetRecord> = read_jsonl(&dir.join("dataset.jsonl"))
        .map_err(|e| PipelineError::Resume(e.to_string()))?;
    let mut by_id: HashMap<String, DatasetRecord> = previous
        .into_iter()
        .map(|r| (r.image_id().to_owned(), r))
        .collect();
    let redo: Vec<String> = inputs
        .image_ids
        .iter()
        .filter(|id| !by_id.get(id.as_str()).is_some_and(DatasetRecord::is_ok))
        .cloned()
        .collect();

    if redo.is_empty() {
        manifest.written_at_ms = now_ms();
        manifest.resumed_images.clear();
        manifest.save(dir)?;
        let records = inputs
            .image_ids
            .iter()
            .filter_map(|id| by_id.remove(id))
            .collect();
        return Ok(RunReport {
            manifest,
            records,
            executed: Vec::new(),
        });
    }

    let mut exec = execute(config, &inputs, &redo, backend, embedder)?;
    if config.fail_fast {
        if let Some(e) = exec.first_failure.take() {
            return Err(e);
        }
    }
    exec.timings.insert("load".to_owned(), load_ms);
    for rec in exec.records {
        by_id.insert(rec.image_id().to_owned(), rec);
    }
    let records: Vec<DatasetRecord> = inputs
        .image_ids
        .iter()
        .map(|id| by_id.remove(id).expect("every image has a record after resume"))
        .collect();

    let t = Instant::now();
    let outputs = write_outputs(dir, &inputs, embedder, &records)?;
    exec.timings.insert("write".to_owned(), ms(t.elapsed()));

    manifest.written_at_ms = now_ms();
    manifest.outputs = outputs;
    manifest.stage_timings_ms = exec.timings;
    manifest.images = records.iter().map(ImageStatus::from).collect();
    manifest.resumed_images = redo.clone();
    manifest.save(dir)?;
    Ok(RunReport {
        manifest,
        records,
        executed: redo,
    })
}
