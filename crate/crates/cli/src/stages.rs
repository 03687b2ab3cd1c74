//! Pipeline stages. Each one reads the artifacts of earlier stages, writes
//! its own under `<out>/<stage>/` and drops a `stamp.json` recording the
//! digest of everything it consumed, so an unchanged re-run is a no-op.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use nmid_core::curation::{CurationStore, NewItem, SourceRef};
use nmid_core::encoder::{forward, EncoderCheckpoint};
use nmid_core::eval::{self, PredictionRecord, ReportFormat};
use nmid_core::gateway::mock::{MockClassifier, MockImageGen, MockVqa, MOCK_CLASSIFIER, MOCK_IMAGEGEN, MOCK_VQA};
use nmid_core::gateway::remote::RemoteBackend;
use nmid_core::gateway::{sha256_hex, ChatBackend, Gateway, ImageBackend, ImageGenRequest};
use nmid_core::index::{build_index, sample_random, top_k_similar, EmbeddingStore, Metric};
use nmid_core::io::{self, write_atomic, DatasetManifest, ManifestRecord, RasterImage, Split};
use nmid_core::mining::mine;
use nmid_core::prompts::{
    build_synthesis_prompt, cot_prompts, parse_ranked_labels, transcripts_from_jsonl, transcripts_to_jsonl,
    vqa_request_from_bytes, Demonstration, FewShotPrompt, QaPair, VqaTranscript,
};
use nmid_core::train::train;

use crate::config::{PipelineConfig, RetrievalSection, Sampler};

/// Name of the real multimodal backend.
pub const REMOTE_BACKEND: &str = "gpt4v-like";

pub const STAGES: [&str; 9] =
    ["gen-data", "prepare", "mine", "train", "describe", "synthesize", "embed", "classify", "evaluate"];

const STAMP: &str = "stamp.json";

#[derive(Debug, Serialize, Deserialize)]
struct Stamp {
    stage: String,
    digest: String,
    outputs: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: &'static str,
    /// True when the stamp matched and nothing was recomputed.
    pub skipped: bool,
    pub outputs: Vec<PathBuf>,
}

/// Length-prefixed hashing of everything a stage depends on.
struct InputDigest(Sha256);

impl InputDigest {
    fn new(stage: &str) -> Self {
        let mut d = Self(Sha256::new());
        d.bytes(stage.as_bytes());
        d
    }

    fn bytes(&mut self, b: &[u8]) {
        self.0.update((b.len() as u64).to_le_bytes());
        self.0.update(b);
    }

    fn json(&mut self, v: &impl Serialize) {
        self.bytes(&serde_json::to_vec(v).expect("config serialises"));
    }

    fn file(&mut self, p: &Path) -> Result<()> {
        self.bytes(p.to_string_lossy().as_bytes());
        self.bytes(&fs::read(p).with_context(|| format!("reading {}", p.display()))?);
        Ok(())
    }

    /// Hashes `p` if it exists, so optional inputs still invalidate on change.
    fn optional_file(&mut self, p: &Path) -> Result<()> {
        if p.exists() {
            return self.file(p);
        }
        self.bytes(b"absent");
        Ok(())
    }

    fn upstream(&mut self, cfg: &PipelineConfig, stage: &str) {
        let digest = read_stamp(&cfg.stage_dir(stage)).map(|s| s.digest).unwrap_or_default();
        self.bytes(digest.as_bytes());
    }

    fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}

fn read_stamp(dir: &Path) -> Option<Stamp> {
    serde_json::from_slice(&fs::read(dir.join(STAMP)).ok()?).ok()
}

fn fresh(dir: &Path, digest: &str) -> Option<Vec<PathBuf>> {
    let s = read_stamp(dir)?;
    (s.digest == digest && s.outputs.iter().all(|p| p.exists())).then_some(s.outputs)
}

fn write_stamp(dir: &Path, stage: &str, digest: String, outputs: &[PathBuf]) -> Result<()> {
    let s = Stamp { stage: stage.into(), digest, outputs: outputs.to_vec() };
    write_atomic(&dir.join(STAMP), &serde_json::to_vec_pretty(&s)?)?;
    Ok(())
}

/// Fails listing every missing prerequisite.
fn require(stage: &str, paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if !missing.is_empty() {
        bail!("{stage}: missing required artifact(s): {}", missing.join(", "));
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)?;
    Ok(())
}

fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Shared stage driver: skip on a matching stamp unless forced.
fn run_stage(
    cfg: &PipelineConfig,
    stage: &'static str,
    force: bool,
    digest: String,
    body: impl FnOnce(&Path) -> Result<Vec<PathBuf>>,
) -> Result<StageOutcome> {
    let dir = cfg.stage_dir(stage);
    if !force {
        if let Some(outputs) = fresh(&dir, &digest) {
            log::info!("{stage}: up to date");
            return Ok(StageOutcome { stage, skipped: true, outputs });
        }
    }
    fs::create_dir_all(&dir)?;
    let outputs = body(&dir)?;
    write_stamp(&dir, stage, digest, &outputs)?;
    log::info!("{stage}: wrote {} artifact(s)", outputs.len());
    Ok(StageOutcome { stage, skipped: false, outputs })
}

pub struct Paths;

impl Paths {
    pub fn prepared(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("prepare").join("manifest.jsonl")
    }
    pub fn mined(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("mine").join("manifest.jsonl")
    }
    pub fn checkpoint(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("train").join("checkpoint.bin")
    }
    pub fn transcripts(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("describe").join("transcripts.jsonl")
    }
    pub fn sources(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("describe").join("sources.json")
    }
    pub fn review_dir(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("review")
    }
    pub fn store(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("embed").join("store.bin")
    }
    pub fn embedded(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("embed").join("manifest.jsonl")
    }
    pub fn predictions(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("classify").join("predictions.jsonl")
    }
    pub fn classify_meta(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("classify").join("meta.json")
    }
    pub fn report(cfg: &PipelineConfig) -> PathBuf {
        cfg.stage_dir("evaluate").join("report.json")
    }
}

pub fn gen_data(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let syn = cfg.synthetic.as_ref().context("gen-data needs a [synthetic] section in the config")?;
    let mut d = InputDigest::new("gen-data");
    d.json(syn);
    d.bytes(cfg.dataset.root.to_string_lossy().as_bytes());
    let digest = d.finish();
    // the images live outside the stage dir, so check them too
    let manifest_path = cfg.stage_dir("gen-data").join("manifest.jsonl");
    let intact = DatasetManifest::read_jsonl(&manifest_path)
        .map(|m| m.records.iter().all(|r| Path::new(&r.path).is_file()))
        .unwrap_or(false);
    run_stage(cfg, "gen-data", force || !intact, digest, |dir| {
        let m = io::generate_synthetic_dataset(&cfg.dataset.root, syn.classes, syn.per_class, syn.size, syn.seed)?;
        let out = dir.join("manifest.jsonl");
        m.write_jsonl(&out)?;
        Ok(vec![out])
    })
}

fn dataset_digest(root: &Path, d: &mut InputDigest) -> Result<()> {
    if !root.is_dir() {
        bail!("prepare: dataset root {} does not exist", root.display());
    }
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry?;
        if entry.file_type().is_file() {
            d.file(entry.path())?;
        }
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct WarningRow {
    path: PathBuf,
    reason: String,
}

pub fn prepare(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let mut d = InputDigest::new("prepare");
    dataset_digest(&cfg.dataset.root, &mut d)?;
    run_stage(cfg, "prepare", force, d.finish(), |dir| {
        let loaded = io::load_dataset(&cfg.dataset.root)?;
        let manifest = dir.join("manifest.jsonl");
        loaded.manifest.write_jsonl(&manifest)?;
        let warnings = dir.join("warnings.json");
        let rows: Vec<WarningRow> =
            loaded.warnings.into_iter().map(|w| WarningRow { path: w.path, reason: w.reason }).collect();
        write_json(&warnings, &rows)?;
        Ok(vec![manifest, warnings])
    })
}

pub fn mine_stage(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let input = Paths::prepared(cfg);
    require("mine", &[&input])?;
    let mut d = InputDigest::new("mine");
    d.upstream(cfg, "prepare");
    d.file(&input)?;
    d.json(&cfg.mining);
    run_stage(cfg, "mine", force, d.finish(), |dir| {
        let outcome = mine(&DatasetManifest::read_jsonl(&input)?, &cfg.mining)?;
        let manifest = dir.join("manifest.jsonl");
        outcome.manifest.write_jsonl(&manifest)?;
        let hardness = dir.join("hardness.jsonl");
        let mut buf = Vec::new();
        for r in &outcome.report {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        write_atomic(&hardness, &buf)?;
        let summary = dir.join("summary.json");
        write_json(&summary, &outcome.summary)?;
        Ok(vec![manifest, hardness, summary])
    })
}

pub fn train_stage(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let input = Paths::mined(cfg);
    require("train", &[&input])?;
    let mut d = InputDigest::new("train");
    d.upstream(cfg, "mine");
    d.file(&input)?;
    d.json(&(&cfg.preprocess, &cfg.encoder, &cfg.train, &cfg.augment));
    run_stage(cfg, "train", force, d.finish(), |dir| {
        let manifest = DatasetManifest::read_jsonl(&input)?;
        let mut log_lines = String::new();
        let (ckpt, report) =
            train(&manifest, &cfg.encoder_preprocess(), &cfg.encoder, &cfg.train, &cfg.augment, &mut |e| {
                log::info!("train: {}", e.log_line());
                log_lines.push_str(&e.log_line());
                log_lines.push('\n');
            })?;
        let ckpt_path = dir.join("checkpoint.bin");
        ckpt.save(&ckpt_path)?;
        let report_path = dir.join("report.json");
        report.write_json(&report_path)?;
        let log_path = dir.join("train.log");
        write_atomic(&log_path, log_lines.as_bytes())?;
        Ok(vec![ckpt_path, report_path, log_path])
    })
}

fn remote(name: &str, cfg: &PipelineConfig) -> Result<RemoteBackend> {
    RemoteBackend::from_env(name, &cfg.backends.model).map_err(|e| anyhow!("backend {name}: {e}"))
}

pub fn vqa_backend(cfg: &PipelineConfig) -> Result<Box<dyn ChatBackend>> {
    match cfg.backends.vqa.as_str() {
        MOCK_VQA => Ok(Box::new(MockVqa)),
        REMOTE_BACKEND => Ok(Box::new(remote(REMOTE_BACKEND, cfg)?)),
        other => bail!("unknown vqa backend {other:?} (expected {MOCK_VQA} or {REMOTE_BACKEND})"),
    }
}

pub fn imagegen_backend(cfg: &PipelineConfig) -> Result<Box<dyn ImageBackend>> {
    match cfg.backends.imagegen.as_str() {
        MOCK_IMAGEGEN => Ok(Box::new(MockImageGen)),
        REMOTE_BACKEND => Ok(Box::new(remote(REMOTE_BACKEND, cfg)?)),
        other => bail!("unknown imagegen backend {other:?} (expected {MOCK_IMAGEGEN} or {REMOTE_BACKEND})"),
    }
}

pub fn gateway(cfg: &PipelineConfig) -> Result<Gateway> {
    let mut policy = cfg.gateway.clone();
    policy.cache_dir = Some(cfg.cache_dir());
    Ok(Gateway::new(policy)?)
}

/// Up to `n` train records, taken round-robin over labels in label order.
pub fn pick_round_robin(manifest: &DatasetManifest, n: usize) -> Vec<ManifestRecord> {
    let mut by_label: BTreeMap<&str, Vec<&ManifestRecord>> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.split == Split::Train) {
        by_label.entry(&r.label).or_default().push(r);
    }
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < n {
        let before = out.len();
        for recs in by_label.values() {
            if out.len() == n {
                break;
            }
            if let Some(r) = recs.get(round) {
                out.push((*r).clone());
            }
        }
        if out.len() == before {
            break;
        }
        round += 1;
    }
    out
}

pub fn describe(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let input = Paths::mined(cfg);
    require("describe", &[&input])?;
    let mut d = InputDigest::new("describe");
    d.upstream(cfg, "mine");
    d.file(&input)?;
    d.json(&(&cfg.describe, &cfg.backends.vqa, &cfg.backends.model));
    run_stage(cfg, "describe", force, d.finish(), |dir| {
        let manifest = DatasetManifest::read_jsonl(&input)?;
        let picked = pick_round_robin(&manifest, cfg.describe.max_images);
        let backend = vqa_backend(cfg)?;
        let gw = gateway(cfg)?;
        let results: Vec<(SourceRef, VqaTranscript)> = picked
            .par_iter()
            .map(|r| -> Result<_> {
                let bytes = fs::read(&r.path).with_context(|| format!("reading {}", r.path))?;
                let hint = cfg.describe.category_hint.then_some(r.label.as_str());
                let mut pairs = Vec::with_capacity(10);
                for (id, question) in cot_prompts().iter() {
                    let req = vqa_request_from_bytes(bytes.clone(), question, hint);
                    let resp = gw.send_chat(backend.as_ref(), &req).with_context(|| format!("VQA on {}", r.id))?;
                    pairs.push(QaPair { prompt_id: id, question: question.to_string(), answer: resp.text });
                }
                let source = SourceRef {
                    image_id: r.id.clone(),
                    path: r.path.clone().into(),
                    digest: sha256_hex(&bytes),
                    label: r.label.clone(),
                };
                let transcript =
                    VqaTranscript { image_id: r.id.clone(), pairs, backend: backend.id().to_string(), ts: now_secs() };
                Ok((source, transcript))
            })
            .collect::<Result<_>>()?;
        let (sources, transcripts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let t_path = dir.join("transcripts.jsonl");
        write_atomic(&t_path, transcripts_to_jsonl(&transcripts).as_bytes())?;
        let s_path = dir.join("sources.json");
        write_json(&s_path, &sources)?;
        Ok(vec![t_path, s_path])
    })
}

#[derive(Debug, Serialize)]
struct EnqueuedRow {
    item_id: String,
    image_id: String,
    new: bool,
    cached: bool,
}

pub fn synthesize(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let (t_path, s_path) = (Paths::transcripts(cfg), Paths::sources(cfg));
    require("synthesize", &[&t_path, &s_path])?;
    let review = Paths::review_dir(cfg);
    let mut d = InputDigest::new("synthesize");
    d.upstream(cfg, "describe");
    d.file(&t_path)?;
    d.file(&s_path)?;
    d.json(&(&cfg.synthesize, &cfg.backends.imagegen, &cfg.preprocess));
    run_stage(cfg, "synthesize", force, d.finish(), |dir| {
        let transcripts = transcripts_from_jsonl(&fs::read_to_string(&t_path)?)?;
        let sources: Vec<SourceRef> = serde_json::from_slice(&fs::read(&s_path)?)?;
        let by_id: HashMap<&str, &SourceRef> = sources.iter().map(|s| (s.image_id.as_str(), s)).collect();
        let backend = imagegen_backend(cfg)?;
        let gw = gateway(cfg)?;
        let store = CurationStore::open(&review)?;
        let images = dir.join("images");
        let mut rows = Vec::new();
        for t in &transcripts {
            let source =
                by_id.get(t.image_id.as_str()).with_context(|| format!("no source recorded for {}", t.image_id))?;
            let req = ImageGenRequest {
                prompt: build_synthesis_prompt(t)?,
                n: cfg.synthesize.images_per_item,
                width: cfg.preprocess.width,
                height: cfg.preprocess.height,
                seed: cfg.synthesize.seed,
            };
            let (synthetics, cached) = gw
                .generate_images(backend.as_ref(), &req, &images)
                .with_context(|| format!("image generation for {}", t.image_id))?;
            let item = NewItem { source: (*source).clone(), transcript: t.clone(), synthetics, salt: 0 };
            let (it, new) = store.enqueue(item)?;
            rows.push(EnqueuedRow { item_id: it.id, image_id: t.image_id.clone(), new, cached });
        }
        let out = dir.join("items.json");
        write_json(&out, &rows)?;
        Ok(vec![out, store.log_path()])
    })
}

pub fn embed(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let (mined, ckpt_path) = (Paths::mined(cfg), Paths::checkpoint(cfg));
    require("embed", &[&mined, &ckpt_path])?;
    let review = Paths::review_dir(cfg);
    let mut d = InputDigest::new("embed");
    d.upstream(cfg, "mine");
    d.upstream(cfg, "train");
    d.file(&mined)?;
    d.file(&ckpt_path)?;
    d.optional_file(&review.join(nmid_core::curation::LOG_FILE))?;
    d.json(&(&cfg.retrieval.metric, &cfg.preprocess));
    run_stage(cfg, "embed", force, d.finish(), |dir| {
        let manifest = DatasetManifest::read_jsonl(&mined)?;
        let augmented = CurationStore::open(&review)?.augmented_manifest(&manifest)?;
        log::info!("embed: {} records, {} synthetic", augmented.records.len(), augmented.synthetic_count());
        let train_set = augmented.to_dataset_manifest()?;
        let ckpt = EncoderCheckpoint::load(&ckpt_path)?;
        let (store, warnings) = build_index(&train_set, &ckpt, &cfg.encoder_preprocess(), cfg.retrieval.metric)?;
        let store_path = dir.join("store.bin");
        store.save(&store_path)?;
        let manifest_path = dir.join("manifest.jsonl");
        train_set.write_jsonl(&manifest_path)?;
        let warn_path = dir.join("warnings.json");
        let rows: Vec<WarningRow> =
            warnings.into_iter().map(|w| WarningRow { path: w.path, reason: w.reason }).collect();
        write_json(&warn_path, &rows)?;
        Ok(vec![store_path, manifest_path, warn_path])
    })
}

struct Query {
    record: ManifestRecord,
    bytes: Vec<u8>,
    embedding: Vec<f64>,
}

/// Everything `classify` needs, loaded once so several sampler settings
/// can be run against the same store.
pub struct ClassifyContext {
    store: EmbeddingStore,
    labels: Vec<String>,
    /// Store id -> (image bytes, label).
    demos: HashMap<String, (Vec<u8>, String)>,
    queries: Vec<Query>,
    backend: Box<dyn ChatBackend>,
}

impl ClassifyContext {
    pub fn load(cfg: &PipelineConfig) -> Result<Self> {
        let (mined, store_path, embedded, ckpt_path) =
            (Paths::mined(cfg), Paths::store(cfg), Paths::embedded(cfg), Paths::checkpoint(cfg));
        require("classify", &[&mined, &store_path, &embedded, &ckpt_path])?;
        let manifest = DatasetManifest::read_jsonl(&mined)?;
        let store = EmbeddingStore::load(&store_path)?;
        let train_set = DatasetManifest::read_jsonl(&embedded)?;
        let ckpt = EncoderCheckpoint::load(&ckpt_path)?;
        let pre = cfg.encoder_preprocess();

        let demos: HashMap<String, (Vec<u8>, String)> = train_set
            .records
            .par_iter()
            .filter(|r| store.position(&r.id).is_some())
            .map(|r| {
                Ok((r.id.clone(), (fs::read(&r.path).with_context(|| format!("reading {}", r.path))?, r.label.clone())))
            })
            .collect::<Result<_>>()?;
        let queries = manifest
            .split(Split::Test)
            .records
            .into_par_iter()
            .map(|record| {
                let bytes = fs::read(&record.path).with_context(|| format!("reading {}", record.path))?;
                let img = RasterImage::decode(&bytes).map_err(|e| anyhow!("{}: {e}", record.path))?;
                let embedding = forward(&io::preprocess_encoder(&img, &pre)?, &ckpt.params, &ckpt.config)?.0;
                Ok(Query { record, bytes, embedding })
            })
            .collect::<Result<Vec<_>>>()?;
        if queries.is_empty() {
            bail!("classify: the mined manifest has no test records");
        }
        let labels = manifest.labels.clone();
        let backend: Box<dyn ChatBackend> = match cfg.backends.classifier.as_str() {
            MOCK_CLASSIFIER => {
                let digests: Vec<(&str, String)> =
                    demos.iter().map(|(id, (b, _))| (id.as_str(), sha256_hex(b))).collect();
                Box::new(MockClassifier::new(ckpt, pre).with_store(&store, digests))
            }
            REMOTE_BACKEND => Box::new(remote(REMOTE_BACKEND, cfg)?),
            other => bail!("unknown classifier backend {other:?} (expected {MOCK_CLASSIFIER} or {REMOTE_BACKEND})"),
        };
        Ok(Self { store, labels, demos, queries, backend })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn store(&self) -> &EmbeddingStore {
        &self.store
    }

    /// Test-split ids with their query embeddings, in manifest order.
    pub fn query_embeddings(&self) -> impl Iterator<Item = (&ManifestRecord, &[f64])> {
        self.queries.iter().map(|q| (&q.record, q.embedding.as_slice()))
    }

    fn demonstrations(&self, q: &Query, r: &RetrievalSection) -> Result<Vec<Demonstration>> {
        let k = r.k.min(self.store.len());
        let picked = match r.sampler {
            Sampler::Similarity => top_k_similar(&self.store, &q.embedding, k, r.metric)?,
            Sampler::Random => sample_random(&self.store, k, query_seed(r.seed, &q.record.id))?,
        };
        picked
            .into_iter()
            .map(|n| {
                let (bytes, label) =
                    self.demos.get(&n.id).with_context(|| format!("no image for store id {}", n.id))?;
                Ok(Demonstration { image: bytes.clone(), label: label.clone() })
            })
            .collect()
    }

    /// One prediction per test record, in manifest order.
    pub fn run(&self, gw: &Gateway, r: &RetrievalSection) -> Result<Vec<PredictionRecord>> {
        self.queries
            .par_iter()
            .map(|q| {
                let prompt = FewShotPrompt::new(self.demonstrations(q, r)?, q.bytes.clone(), self.labels.clone())?;
                let resp = gw
                    .send_chat(self.backend.as_ref(), &prompt.to_request())
                    .with_context(|| format!("classifying {}", q.record.id))?;
                let predicted = match parse_ranked_labels(&resp.text, &self.labels) {
                    Ok(p) => p.labels,
                    Err(e) => {
                        log::warn!("classify: {}: {e}", q.record.id);
                        Vec::new()
                    }
                };
                Ok(PredictionRecord {
                    image_id: q.record.id.clone(),
                    true_label: q.record.label.clone(),
                    predicted,
                    raw: Some(resp.text),
                })
            })
            .collect()
    }
}

/// Per-query seed for the random sampler, so each query draws its own demos.
pub fn query_seed(seed: u64, id: &str) -> u64 {
    let h = Sha256::digest(format!("{seed}:{id}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassifyMeta {
    sampler: Sampler,
    k: usize,
    seed: u64,
    metric: Metric,
    backend: String,
}

pub fn classify(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let inputs = [Paths::mined(cfg), Paths::store(cfg), Paths::embedded(cfg), Paths::checkpoint(cfg)];
    require("classify", &inputs.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    let mut d = InputDigest::new("classify");
    d.upstream(cfg, "embed");
    for p in &inputs {
        d.file(p)?;
    }
    d.json(&(&cfg.retrieval, &cfg.backends.classifier, &cfg.backends.model));
    run_stage(cfg, "classify", force, d.finish(), |dir| {
        let ctx = ClassifyContext::load(cfg)?;
        let records = ctx.run(&gateway(cfg)?, &cfg.retrieval)?;
        let preds = dir.join("predictions.jsonl");
        eval::write_predictions(&preds, &records)?;
        let meta = dir.join("meta.json");
        let r = &cfg.retrieval;
        write_json(
            &meta,
            &ClassifyMeta {
                sampler: r.sampler,
                k: r.k,
                seed: r.seed,
                metric: r.metric,
                backend: ctx.backend.id().into(),
            },
        )?;
        Ok(vec![preds, meta])
    })
}

pub fn evaluate(cfg: &PipelineConfig, force: bool) -> Result<StageOutcome> {
    let (preds, mined) = (Paths::predictions(cfg), Paths::mined(cfg));
    require("evaluate", &[&preds, &mined])?;
    let meta_path = Paths::classify_meta(cfg);
    let mut d = InputDigest::new("evaluate");
    d.file(&preds)?;
    d.file(&mined)?;
    d.optional_file(&meta_path)?;
    run_stage(cfg, "evaluate", force, d.finish(), |dir| {
        let records = eval::read_predictions(&preds)?;
        let labels = DatasetManifest::read_jsonl(&mined)?.labels;
        let mut report = eval::evaluate(&records, &labels)?;
        if let Ok(bytes) = fs::read(&meta_path) {
            let meta: ClassifyMeta = serde_json::from_slice(&bytes)?;
            let v = serde_json::to_value(&meta)?;
            for (k, v) in v.as_object().expect("meta is an object") {
                report.meta.insert(k.clone(), v.as_str().map_or_else(|| v.to_string(), str::to_string));
            }
        }
        Ok(eval::emit_report(&report, dir, &[ReportFormat::Json, ReportFormat::Csv])?)
    })
}

pub fn run_one(cfg: &PipelineConfig, stage: &str, force: bool) -> Result<StageOutcome> {
    match stage {
        "gen-data" => gen_data(cfg, force),
        "prepare" => prepare(cfg, force),
        "mine" => mine_stage(cfg, force),
        "train" => train_stage(cfg, force),
        "describe" => describe(cfg, force),
        "synthesize" => synthesize(cfg, force),
        "embed" => embed(cfg, force),
        "classify" => classify(cfg, force),
        "evaluate" => evaluate(cfg, force),
        other => bail!("unknown stage {other:?}"),
    }
}

/// Runs every stage in order. `gen-data` only runs with a `[synthetic]`
/// section, and the VQA/synthesis stages only when `describe.max_images > 0`.
pub fn run_all(cfg: &PipelineConfig, force: bool) -> Result<Vec<StageOutcome>> {
    let mut out = Vec::new();
    for stage in STAGES {
        let wanted = match stage {
            "gen-data" => cfg.synthetic.is_some(),
            "describe" | "synthesize" => cfg.describe.max_images > 0,
            _ => true,
        };
        if wanted {
            out.push(run_one(cfg, stage, force).with_context(|| format!("stage {stage} failed"))?);
        }
    }
    Ok(out)
}
