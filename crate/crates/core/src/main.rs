use std::collections::{BTreeMap, HashMap};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use rapsg::clip_guidance::{infonce_loss, Direction, GuidanceBatch};
use rapsg::embedding_store::{
    l2_normalize, overlap_filter, read_exclusion_list, DescriptionCatalog, EmbeddingStore, StoreError,
};
use rapsg::fluency_filter::{select_best, CiderParams, CiderVariant, IdfTable, DEFAULT_SIGMA};
use rapsg::grouping::{dedup_texts, partition_remainder, select_head, validate_k_m, GroupingRecord};
use rapsg::metrics::score_corpus;
use rapsg::pipeline::{
    read_jsonl, resume, run_pipeline, write_atomic, write_jsonl, PipelineConfig, PipelineError,
    Predictions, BACKEND_ENV,
};
use rapsg::retrieval::{top_k_batch, TopK, TopKRecord};
use rapsg::sentence_embedder::{embed_texts, HashEmbedder, DEFAULT_HASH_DIM};
use rapsg::summarization::{
    refine, summarize_group, ExtractiveFallback, HttpBackend, RetryPolicy, SummarizationRequest,
    SummarizeError, SummarizerBackend, DEFAULT_MAX_TOKENS,
};

#[derive(Parser)]
#[command(name = "rapsg", version, about = "Retrieval-augmented pseudo caption generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact cosine top-k descriptions per image.
    Retrieve(RetrieveArgs),
    /// Split each top-k list into a head and similarity-ranked tail groups.
    Group(GroupArgs),
    /// Summarize description groups.
    Summarize(SummarizeArgs),
    /// Refine captioner predictions with descriptions.
    Refine(SummarizeArgs),
    /// Pick one candidate per image by CIDEr against the prediction.
    Filter(FilterArgs),
    /// InfoNCE loss and gradients for paired embeddings.
    Guidance(GuidanceArgs),
    /// Corpus BLEU-1..4 and ROUGE-L.
    Score(ScoreArgs),
    /// Run the whole pipeline.
    Run(RunArgs),
    /// Finish a previous run, recomputing only failed or missing images.
    Resume(RunArgs),
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    descriptions: PathBuf,
    #[arg(long)]
    catalog: PathBuf,
    /// Source image ids whose descriptions are dropped before retrieval.
    #[arg(long)]
    exclusions: Option<PathBuf>,
    #[arg(long, default_value_t = rapsg::retrieval::DEFAULT_K)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroupArgs {
    #[arg(long)]
    topk: PathBuf,
    #[arg(long, default_value_t = rapsg::grouping::DEFAULT_M)]
    m: usize,
    /// Embedding of each image's head summary, keyed by image id.
    #[arg(long)]
    c1_embeddings: PathBuf,
    /// Sentence embeddings of the descriptions.
    #[arg(long, conflicts_with = "catalog")]
    sentence_embeddings: Option<PathBuf>,
    /// Embed description texts from this catalog with the hash embedder instead.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HASH_DIM)]
    sentence_dim: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BackendArgs {
    /// Summarizer service base URL; the built-in fallback is used when unset.
    #[arg(long, env = BACKEND_ENV)]
    backend_url: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_TOKENS)]
    max_tokens: usize,
}

#[derive(Args)]
struct SummarizeArgs {
    /// JSON Lines of {id, descriptions, [prediction], [seed]}.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also write hash sentence embeddings of the outputs, keyed by id.
    #[arg(long)]
    embed_out: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HASH_DIM)]
    sentence_dim: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum CiderFlag {
    CiderD,
    Plain,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    predictions: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cider-d")]
    cider: CiderFlag,
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
}

#[derive(Args)]
struct GuidanceArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    texts: PathBuf,
    /// JSON Lines of {image_id, text_id}; row i of the batch is line i.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, default_value_t = rapsg::clip_guidance::DEFAULT_TAU)]
    tau: f64,
    /// Gradient store; a JSON summary is written next to it with a `.json` suffix.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    symmetric: bool,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the named flags.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    m: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    concurrency: Option<String>,
    #[arg(long)]
    image_store: Option<String>,
    #[arg(long)]
    description_store: Option<String>,
    #[arg(long)]
    catalog: Option<String>,
    #[arg(long)]
    sentence_embedder: Option<String>,
    #[arg(long)]
    sentence_dim: Option<String>,
    #[arg(long)]
    predictions: Option<String>,
    #[arg(long)]
    exclusions: Option<String>,
    #[arg(long)]
    image_list: Option<String>,
    #[arg(long)]
    output_dir: Option<String>,
    #[arg(long)]
    stage2: Option<String>,
    #[arg(long)]
    cider: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    fail_fast: Option<String>,
}

/// An error paired with the process exit code it maps to.
struct Fail {
    code: u8,
    message: String,
}

fn fail(code: u8, e: impl Display) -> Fail {
    Fail {
        code,
        message: e.to_string(),
    }
}

fn usage(e: impl Display) -> Fail {
    fail(1, e)
}

fn input(e: impl Display) -> Fail {
    fail(2, e)
}

impl From<PipelineError> for Fail {
    fn from(e: PipelineError) -> Self {
        fail(e.exit_code() as u8, e)
    }
}

impl From<StoreError> for Fail {
    fn from(e: StoreError) -> Self {
        input(e)
    }
}

impl From<SummarizeError> for Fail {
    fn from(e: SummarizeError) -> Self {
        match e {
            SummarizeError::Backend { .. } | SummarizeError::Protocol { .. } => fail(3, e),
            SummarizeError::Precondition { .. } => input(e),
        }
    }
}

type CmdResult = Result<u8, Fail>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Retrieve(a) => cmd_retrieve(a),
        Command::Group(a) => cmd_group(a),
        Command::Summarize(a) => cmd_summarize(a, false),
        Command::Refine(a) => cmd_summarize(a, true),
        Command::Filter(a) => cmd_filter(a),
        Command::Guidance(a) => cmd_guidance(a),
        Command::Score(a) => cmd_score(a),
        Command::Run(a) => cmd_run(a, false),
        Command::Resume(a) => cmd_run(a, true),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn load_normalized(path: &Path) -> Result<EmbeddingStore, Fail> {
    let store = EmbeddingStore::load(path)?;
    if store.is_normalized() {
        Ok(store)
    } else {
        Ok(l2_normalize(&store)?)
    }
}

fn cmd_retrieve(a: RetrieveArgs) -> CmdResult {
    if a.k == 0 {
        return Err(usage("--k must be positive"));
    }
    let images = load_normalized(&a.images)?;
    let descriptions = load_normalized(&a.descriptions)?;
    let mut catalog = DescriptionCatalog::load(&a.catalog)?;
    catalog.check_against(&descriptions)?;
    if let Some(p) = &a.exclusions {
        catalog = overlap_filter(&catalog, &read_exclusion_list(p)?);
    }
    let descriptions = descriptions.retain(|id| catalog.contains(id))?;

    let ids = images.ids().to_vec();
    let mut records = Vec::with_capacity(ids.len());
    for r in top_k_batch(&ids, &images, &descriptions, a.k) {
        records.push(TopKRecord::from(&r.map_err(input)?));
    }
    write_jsonl(&a.out, &records)?;
    Ok(0)
}

fn cmd_group(a: GroupArgs) -> CmdResult {
    let topks: Vec<TopKRecord> = read_jsonl(&a.topk)?;
    let c1 = load_normalized(&a.c1_embeddings)?;
    let sentences = match (&a.sentence_embeddings, &a.catalog) {
        (Some(p), _) => load_normalized(p)?,
        (None, Some(p)) => {
            let catalog = DescriptionCatalog::load(p)?;
            let wanted: std::collections::HashSet<&str> = topks
                .iter()
                .flat_map(|t| t.topk.iter().map(|e| e.desc_id.as_str()))
                .collect();
            let items = catalog
                .entries()
                .iter()
                .filter(|e| wanted.contains(e.id.as_str()))
                .map(|e| (e.id.as_str(), e.text.as_str()));
            embed_texts(&HashEmbedder::new(a.sentence_dim), items)?
        }
        (None, None) => return Err(usage("one of --sentence-embeddings or --catalog is required")),
    };

    let mut out = Vec::with_capacity(topks.len());
    for rec in topks {
        let topk = TopK::from(rec);
        validate_k_m(topk.len(), a.m).map_err(usage)?;
        let embedding = c1
            .get(&topk.image_id)
            .ok_or_else(|| input(format!("no c1 embedding for image {:?}", topk.image_id)))?;
        let head = select_head(&topk, a.m).map_err(input)?;
        let plan = partition_remainder(&topk, &head, embedding, &sentences)
            .map_err(|e| input(format!("{}: {e}", topk.image_id)))?;
        out.push(GroupingRecord::from(&plan));
    }
    write_jsonl(&a.out, &out)?;
    Ok(0)
}

#[derive(Deserialize)]
struct SummaryInput {
    id: String,
    descriptions: Vec<String>,
    #[serde(default)]
    prediction: Option<String>,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct SummaryOutput<'a> {
    id: &'a str,
    summary: &'a str,
}

fn make_backend(args: &BackendArgs) -> Result<Box<dyn SummarizerBackend>, Fail> {
    Ok(match args.backend_url.as_deref().map(str::trim) {
        Some(url) if !url.is_empty() => {
            Box::new(HttpBackend::new(url, RetryPolicy::default()).map_err(usage)?)
        }
        _ => Box::new(ExtractiveFallback),
    })
}

fn cmd_summarize(a: SummarizeArgs, refining: bool) -> CmdResult {
    let inputs: Vec<SummaryInput> = read_jsonl(&a.input)?;
    let backend = make_backend(&a.backend)?;
    let mut summaries = Vec::with_capacity(inputs.len());
    for item in &inputs {
        let seed = item.seed.unwrap_or(a.backend.seed);
        let text = if refining {
            let prediction = item
                .prediction
                .as_deref()
                .ok_or_else(|| input(format!("{}: refine input needs a prediction", item.id)))?;
            let req = SummarizationRequest::refine(
                item.id.clone(),
                prediction,
                item.descriptions.clone(),
                seed,
                a.backend.max_tokens,
            );
            refine(&req, backend.as_ref())?
        } else {
            let req = SummarizationRequest::summarize(
                item.id.clone(),
                dedup_texts(item.descriptions.iter().map(String::as_str)),
                seed,
                a.backend.max_tokens,
            );
            summarize_group(&req, backend.as_ref())?
        };
        summaries.push(text);
    }
    let lines: Vec<SummaryOutput> = inputs
        .iter()
        .zip(&summaries)
        .map(|(i, s)| SummaryOutput { id: &i.id, summary: s })
        .collect();
    write_jsonl(&a.out, &lines)?;
    if let Some(p) = &a.embed_out {
        let items = inputs.iter().zip(&summaries).map(|(i, s)| (i.id.as_str(), s.as_str()));
        embed_texts(&HashEmbedder::new(a.sentence_dim), items)?.save(p)?;
    }
    Ok(0)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum CandidateText {
    Plain(String),
    WithProvenance { text: String },
}

impl CandidateText {
    fn text(&self) -> &str {
        match self {
            Self::Plain(t) | Self::WithProvenance { text: t } => t,
        }
    }
}

#[derive(Deserialize)]
struct CandidateLine {
    image_id: String,
    candidates: Vec<CandidateText>,
}

fn cmd_filter(a: FilterArgs) -> CmdResult {
    if a.sigma.is_nan() || a.sigma <= 0.0 {
        return Err(usage("--sigma must be positive"));
    }
    let lines: Vec<CandidateLine> = read_jsonl(&a.candidates)?;
    let predictions = Predictions::load(&a.predictions)?;
    let idf = IdfTable::build(&predictions.texts()).map_err(input)?;
    let params = CiderParams {
        variant: match a.cider {
            CiderFlag::CiderD => CiderVariant::CiderD,
            CiderFlag::Plain => CiderVariant::Plain,
        },
        sigma: a.sigma,
    };
    let mut out = Vec::with_capacity(lines.len());
    for line in &lines {
        let Some(prediction) = predictions.get(&line.image_id) else {
            log::warn!("no prediction for image {:?}; skipped", line.image_id);
            continue;
        };
        let texts: Vec<&str> = line.candidates.iter().map(CandidateText::text).collect();
        out.push(select_best(&line.image_id, &texts, prediction, &idf, params).map_err(input)?);
    }
    write_jsonl(&a.out, &out)?;
    Ok(0)
}

#[derive(Deserialize)]
struct PairLine {
    image_id: String,
    text_id: String,
}

fn cmd_guidance(a: GuidanceArgs) -> CmdResult {
    let images = EmbeddingStore::load(&a.images)?;
    let texts = EmbeddingStore::load(&a.texts)?;
    let pairs: Vec<PairLine> = read_jsonl(&a.pairs)?;
    let pairs: Vec<(String, String)> = pairs.into_iter().map(|p| (p.image_id, p.text_id)).collect();
    let batch = GuidanceBatch::from_stores(&images, &texts, &pairs, a.tau).map_err(input)?;
    let direction = if a.symmetric {
        Direction::Symmetric
    } else {
        Direction::ImageToText
    };
    let out = infonce_loss(&batch, direction);

    let mut ids = Vec::with_capacity(2 * pairs.len());
    let mut data = Vec::with_capacity(2 * pairs.len() * batch.dim());
    for (i, (img, _)) in pairs.iter().enumerate() {
        ids.push(format!("image:{i}:{img}"));
        data.extend(out.grad_images.row(i).iter().map(|&x| x as f32));
    }
    for (i, (_, txt)) in pairs.iter().enumerate() {
        ids.push(format!("text:{i}:{txt}"));
        data.extend(out.grad_texts.row(i).iter().map(|&x| x as f32));
    }
    EmbeddingStore::new(ids, batch.dim(), data, false)?.save(&a.out)?;

    let summary = serde_json::json!({
        "loss": out.loss,
        "B": batch.batch_size(),
        "d": batch.dim(),
        "tau": batch.tau(),
    });
    let mut bytes = serde_json::to_vec(&summary).expect("summary serializes");
    bytes.push(b'\n');
    let mut json_path = a.out.clone().into_os_string();
    json_path.push(".json");
    write_atomic(Path::new(&json_path), &bytes)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    Ok(0)
}

#[derive(Deserialize)]
struct CaptionLine {
    image_id: String,
    #[serde(default, alias = "selected_sentence")]
    caption: Option<String>,
    #[serde(default)]
    references: Vec<String>,
}

fn cmd_score(a: ScoreArgs) -> CmdResult {
    let cands: Vec<CaptionLine> = read_jsonl(&a.candidates)?;
    let refs: Vec<CaptionLine> = read_jsonl(&a.references)?;
    let mut by_image: HashMap<String, Vec<String>> = HashMap::new();
    for r in refs {
        let entry = by_image.entry(r.image_id).or_default();
        entry.extend(r.references);
        entry.extend(r.caption);
    }
    let mut candidates = Vec::with_capacity(cands.len());
    let mut references = Vec::with_capacity(cands.len());
    for c in cands {
        let caption = c
            .caption
            .ok_or_else(|| input(format!("{}: candidate line has no caption", c.image_id)))?;
        let r = by_image
            .remove(&c.image_id)
            .ok_or_else(|| input(format!("{}: no references (or candidate listed twice)", c.image_id)))?;
        candidates.push(caption);
        references.push(r);
    }
    let s = score_corpus(&candidates, &references).map_err(input)?;
    let mut report = BTreeMap::new();
    for (n, b) in s.bleu.iter().enumerate() {
        report.insert(format!("bleu_{}", n + 1), serde_json::json!(b));
    }
    report.insert("rouge_l".into(), serde_json::json!(s.rouge_l));
    report.insert("sentences".into(), serde_json::json!(s.sentence_count));
    let mut bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    bytes.push(b'\n');
    write_atomic(&a.out, &bytes)?;
    Ok(0)
}

fn build_config(a: &RunArgs) -> Result<PipelineConfig, Fail> {
    let mut config = match &a.config {
        Some(p) => PipelineConfig::from_file(p)?,
        None => PipelineConfig::default(),
    };
    config.apply_env()?;
    let named = [
        ("k", &a.k),
        ("m", &a.m),
        ("tau", &a.tau),
        ("max_tokens", &a.max_tokens),
        ("seed", &a.seed),
        ("backend", &a.backend),
        ("concurrency", &a.concurrency),
        ("image_store", &a.image_store),
        ("description_store", &a.description_store),
        ("catalog", &a.catalog),
        ("sentence_embedder", &a.sentence_embedder),
        ("sentence_dim", &a.sentence_dim),
        ("predictions", &a.predictions),
        ("exclusions", &a.exclusions),
        ("image_list", &a.image_list),
        ("output_dir", &a.output_dir),
        ("stage2", &a.stage2),
        ("cider", &a.cider),
        ("sigma", &a.sigma),
        ("fail_fast", &a.fail_fast),
    ];
    for (key, value) in named {
        if let Some(v) = value {
            config.set(key, v, None)?;
        }
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        config.set(k.trim(), v.trim(), None)?;
    }
    Ok(config)
}

fn cmd_run(a: RunArgs, resuming: bool) -> CmdResult {
    let config = build_config(&a)?;
    let report = if resuming {
        resume(&config)?
    } else {
        run_pipeline(&config)?
    };
    let failed = report.failures();
    eprintln!(
        "{} images, {} computed, {} failed",
        report.records.len(),
        report.executed.len(),
        failed
    );
    Ok(if failed > 0 { 4 } else { 0 })
}
