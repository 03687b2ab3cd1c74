//! Pipeline configuration: one TOML file, optionally patched with
//! `--set section.key=value` overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use nmid_core::encoder::EncoderConfig;
use nmid_core::gateway::GatewayPolicy;
use nmid_core::index::Metric;
use nmid_core::io::PreprocessConfig;
use nmid_core::mining::MiningConfig;
use nmid_core::train::{AugmentationConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// One subdirectory per category.
    pub root: PathBuf,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { root: PathBuf::from("data") }
    }
}

/// When present, `gen-data` writes a seeded synthetic corpus into `dataset.root`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSection {
    pub classes: usize,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        Self { classes: 10, per_class: 200, size: 64, seed: 7 }
    }
}

/// Encoder input resolution. The encoder section's image dims and channels follow it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessSection {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { height: 224, width: 224, channels: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Sampler {
    Similarity,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalSection {
    pub metric: Metric,
    pub k: usize,
    pub sampler: Sampler,
    pub seed: u64,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self { metric: Metric::Cosine, k: 5, sampler: Sampler::Similarity, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSection {
    pub vqa: String,
    pub classifier: String,
    pub imagegen: String,
    /// Model name sent to the real backend.
    pub model: String,
}

impl Default for BackendSection {
    fn default() -> Self {
        Self {
            vqa: "mock-vqa".into(),
            classifier: "mock-classifier".into(),
            imagegen: "mock-imagegen".into(),
            model: "gpt-4-vision".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DescribeSection {
    /// Train images to describe, taken round-robin across labels.
    pub max_images: usize,
    /// Put the true category in the VQA preamble.
    pub category_hint: bool,
}

impl Default for DescribeSection {
    fn default() -> Self {
        Self { max_images: 10, category_hint: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesizeSection {
    pub images_per_item: usize,
    pub seed: u64,
}

impl Default for SynthesizeSection {
    fn default() -> Self {
        Self { images_per_item: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviewSection {
    pub bind: String,
    /// Shared bearer token; no auth when absent.
    pub token: Option<String>,
    /// Allowed CORS origin; any origin when absent.
    pub cors_origin: Option<String>,
    /// Static review UI served under `/ui/` when set.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ReviewSection {
    fn default() -> Self {
        Self { bind: "127.0.0.1:8077".into(), token: None, cors_origin: None, ui_dir: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    pub dataset: DatasetSection,
    pub synthetic: Option<SyntheticSection>,
    pub preprocess: PreprocessSection,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub mining: MiningConfig,
    pub retrieval: RetrievalSection,
    pub backends: BackendSection,
    pub gateway: GatewayPolicy,
    pub describe: DescribeSection,
    pub synthesize: SynthesizeSection,
    pub review: ReviewSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            synthetic: None,
            preprocess: PreprocessSection::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            augment: AugmentationConfig::default(),
            mining: MiningConfig::default(),
            retrieval: RetrievalSection::default(),
            backends: BackendSection::default(),
            gateway: GatewayPolicy::default(),
            describe: DescribeSection::default(),
            synthesize: SynthesizeSection::default(),
            review: ReviewSection::default(),
        }
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    // reuse the TOML grammar for the right-hand side; fall back to a bare string
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` to a TOML document, creating tables as needed.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) =
        assignment.split_once('=').with_context(|| format!("override {assignment:?} is not key=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().with_context(|| format!("override {assignment:?}: {k} is not a table"))?;
    }
    table.insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().context("config is not valid TOML")?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(doc).try_into().context("invalid pipeline config")?;
        cfg.sync_encoder_dims();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative `out_dir` and `dataset.root` resolve against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_toml(&text, overrides).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.out_dir, &mut cfg.dataset.root] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn sync_encoder_dims(&mut self) {
        self.encoder.image_height = self.preprocess.height;
        self.encoder.image_width = self.preprocess.width;
        self.encoder.channels = self.preprocess.channels;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.encoder_preprocess().validate(Some(self.encoder.patch_size))?;
        self.train.validate()?;
        self.augment.validate()?;
        self.gateway.validate()?;
        if self.mining.clusters < 2 {
            bail!("mining.clusters must be >= 2");
        }
        if !(0.0..1.0).contains(&self.mining.test_fraction) {
            bail!("mining.test_fraction must be in [0, 1)");
        }
        if self.retrieval.k == 0 {
            bail!("retrieval.k must be >= 1");
        }
        if self.synthesize.images_per_item == 0 {
            bail!("synthesize.images_per_item must be >= 1");
        }
        if let Some(s) = &self.synthetic {
            if s.classes < 2 || s.per_class < 2 || s.size == 0 {
                bail!("synthetic needs >= 2 classes, >= 2 images per class and a positive size");
            }
        }
        Ok(())
    }

    pub fn encoder_preprocess(&self) -> PreprocessConfig {
        PreprocessConfig::encoder(self.preprocess.height, self.preprocess.width, self.preprocess.channels)
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out_dir.join(stage)
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.gateway.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }
}
