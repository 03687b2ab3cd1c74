//! Dataset loading, manifests, preprocessing and the seeded synthetic corpus.
//!
//! Datasets live on disk as `<root>/<label>/<image>.png|jpg`. Manifests are
//! JSON Lines with the keys `id,path,label,split,hardness` in that order.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::ImageEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory not found: {0}")]
    MissingDirectory(PathBuf),
    #[error("category directory {0} holds no images")]
    EmptyCategory(PathBuf),
    #[error("dataset directory {0} holds no category subdirectories")]
    NoCategories(PathBuf),
    #[error("cannot decode image {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("cannot encode image: {0}")]
    Encode(String),
    #[error("invalid raster: {0}")]
    InvalidRaster(String),
    #[error("invalid preprocess config: {0}")]
    InvalidConfig(String),
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("duplicate manifest id {0}")]
    DuplicateId(String),
    #[error("synthetic dataset needs at least 2 classes and 2 images per class")]
    TooSmall,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Decoded pixels in `[0, 1]`, row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl RasterImage {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self, DatasetError> {
        if channels != 1 && channels != 3 {
            return Err(DatasetError::InvalidRaster(format!("channels must be 1 or 3, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(DatasetError::InvalidRaster("empty image".into()));
        }
        if pixels.len() != height * width * channels {
            return Err(DatasetError::InvalidRaster(format!(
                "{} pixels for {height}x{width}x{channels}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DatasetError::InvalidRaster(format!("pixel {bad} outside [0,1]")));
        }
        Ok(Self { height, width, channels, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, String> {
        let img = image::load_from_memory(bytes).map_err(|e| e.to_string())?;
        let color = img.color();
        let (channels, raw, w, h) = if color.has_color() {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            (3, rgb.into_raw(), w, h)
        } else {
            let l = img.to_luma8();
            let (w, h) = l.dimensions();
            (1, l.into_raw(), w, h)
        };
        let pixels = raw.into_iter().map(|b| f64::from(b) / 255.0).collect();
        Self::new(h as usize, w as usize, channels, pixels).map_err(|e| e.to_string())
    }

    pub fn open(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path)?;
        Self::decode(&bytes).map_err(|reason| DatasetError::Decode { path: path.to_path_buf(), reason })
    }

    /// 8-bit PNG encoding (grayscale or RGB).
    pub fn to_png(&self) -> Result<Vec<u8>, DatasetError> {
        let raw: Vec<u8> = self.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        let color = if self.channels == 1 { image::ExtendedColorType::L8 } else { image::ExtendedColorType::Rgb8 };
        let mut out = Vec::new();
        image::codecs::png::PngEncoder::new(&mut out)
            .write_image(&raw, self.width as u32, self.height as u32, color)
            .map_err(|e| DatasetError::Encode(e.to_string()))?;
        Ok(out)
    }
}

/// Preprocessed numeric image for the encoder, values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * channels, "ImageTensor shape");
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessMode {
    MiningZscore,
    EncoderSigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub target_height: usize,
    pub target_width: usize,
    pub mode: PreprocessMode,
    /// Replicate grayscale to this many channels (1 or 3); `None` keeps the source count.
    #[serde(default)]
    pub channels: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { target_height: 224, target_width: 224, mode: PreprocessMode::MiningZscore, channels: None }
    }
}

impl PreprocessConfig {
    pub fn mining(h: usize, w: usize) -> Self {
        Self { target_height: h, target_width: w, mode: PreprocessMode::MiningZscore, channels: None }
    }

    pub fn encoder(h: usize, w: usize, channels: usize) -> Self {
        Self { target_height: h, target_width: w, mode: PreprocessMode::EncoderSigned, channels: Some(channels) }
    }

    /// Checks dims, and divisibility by `patch_size` in encoder mode.
    pub fn validate(&self, patch_size: Option<usize>) -> Result<(), DatasetError> {
        if self.target_height == 0 || self.target_width == 0 {
            return Err(DatasetError::InvalidConfig("target dims must be > 0".into()));
        }
        if let Some(c) = self.channels {
            if c != 1 && c != 3 {
                return Err(DatasetError::InvalidConfig(format!("channels must be 1 or 3, got {c}")));
            }
        }
        if let (PreprocessMode::EncoderSigned, Some(p)) = (self.mode, patch_size) {
            if p == 0 || self.target_height % p != 0 || self.target_width % p != 0 {
                return Err(DatasetError::InvalidConfig(format!(
                    "target {}x{} not divisible by patch size {p}",
                    self.target_height, self.target_width
                )));
            }
        }
        Ok(())
    }
}

/// Flattened, z-scored image. `constant` marks the zero-variance case.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub constant: bool,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(pixels: &[f64], h: usize, w: usize, c: usize, th: usize, tw: usize) -> Vec<f64> {
    if h == th && w == tw {
        return pixels.to_vec();
    }
    let sy = h as f64 / th as f64;
    let sx = w as f64 / tw as f64;
    let mut out = vec![0.0; th * tw * c];
    for ty in 0..th {
        let fy = ((ty as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for tx in 0..tw {
            let fx = ((tx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| pixels[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(ty * tw + tx) * c + ch] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

fn replicate_channels(pixels: Vec<f64>, from: usize, to: usize) -> Vec<f64> {
    match (from, to) {
        (a, b) if a == b => pixels,
        (1, 3) => pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        // luminance average for RGB -> gray
        (3, 1) => pixels.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect(),
        _ => unreachable!("validated channel counts"),
    }
}

fn resized(img: &RasterImage, cfg: &PreprocessConfig) -> (Vec<f64>, usize) {
    let px = resize_bilinear(&img.pixels, img.height, img.width, img.channels, cfg.target_height, cfg.target_width);
    let ch = cfg.channels.unwrap_or(img.channels);
    (replicate_channels(px, img.channels, ch), ch)
}

pub fn preprocess_mining(img: &RasterImage, cfg: &PreprocessConfig) -> Result<FeatureVector, DatasetError> {
    if cfg.mode != PreprocessMode::MiningZscore {
        return Err(DatasetError::InvalidConfig("preprocess_mining requires mining-zscore mode".into()));
    }
    cfg.validate(None)?;
    let (mut values, _) = resized(img, cfg);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= f64::EPSILON * f64::EPSILON {
        return Ok(FeatureVector { values: vec![0.0; values.len()], constant: true });
    }
    let sd = var.sqrt();
    for v in &mut values {
        *v = (*v - mean) / sd;
    }
    Ok(FeatureVector { values, constant: false })
}

pub fn preprocess_encoder(img: &RasterImage, cfg: &PreprocessConfig) -> Result<ImageTensor, DatasetError> {
    if cfg.mode != PreprocessMode::EncoderSigned {
        return Err(DatasetError::InvalidConfig("preprocess_encoder requires encoder-signed mode".into()));
    }
    cfg.validate(None)?;
    let (values, ch) = resized(img, cfg);
    let data = values.into_iter().map(|v| 2.0 * v - 1.0).collect();
    Ok(ImageTensor::new(cfg.target_height, cfg.target_width, ch, data))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: String,
    pub split: Split,
    pub hardness: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    /// Sorted, distinct category names.
    pub labels: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self, DatasetError> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(DatasetError::DuplicateId(r.id.clone()));
            }
        }
        let labels: BTreeSet<String> = records.iter().map(|r| r.label.clone()).collect();
        Ok(Self { labels: labels.into_iter().collect(), records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self, split: Split) -> DatasetManifest {
        let records: Vec<_> = self.records.iter().filter(|r| r.split == split).cloned().collect();
        DatasetManifest { labels: self.labels.clone(), records }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), DatasetError> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut buf = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut buf, r).map_err(std::io::Error::other)?;
            buf.push(b'\n');
        }
        write_atomic(path, &buf)?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, DatasetError> {
        let file = fs::File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| DatasetError::Manifest { line: i + 1, reason: e.to_string() })?;
            records.push(rec);
        }
        Self::new(records)
    }
}

/// Write `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp =
        dir.join(format!(".{}.{}.tmp", path.file_name().and_then(|s| s.to_str()).unwrap_or("out"), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadWarning {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub warnings: Vec<LoadWarning>,
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn sorted_entries(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
    v.sort();
    Ok(v)
}

/// One record per decodable image under `<root>/<label>/`, ordered by path.
pub fn load_dataset(root: &Path) -> Result<LoadedDataset, DatasetError> {
    if !root.is_dir() {
        return Err(DatasetError::MissingDirectory(root.to_path_buf()));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    let mut categories = 0;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        categories += 1;
        let label = dir.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let files: Vec<PathBuf> =
            sorted_entries(&dir)?.into_iter().filter(|p| p.is_file() && is_image_file(p)).collect();
        if files.is_empty() {
            return Err(DatasetError::EmptyCategory(dir));
        }
        for path in files {
            match RasterImage::open(&path) {
                Ok(_) => {
                    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
                    records.push(ManifestRecord {
                        id: format!("{label}/{name}"),
                        path: path.to_string_lossy().into_owned(),
                        label: label.clone(),
                        split: Split::Unassigned,
                        hardness: None,
                    });
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    warnings.push(LoadWarning { path, reason: e.to_string() });
                }
            }
        }
    }
    if categories == 0 {
        return Err(DatasetError::NoCategories(root.to_path_buf()));
    }
    Ok(LoadedDataset { manifest: DatasetManifest::new(records)?, warnings })
}

/// Procedural texture families used by the synthetic corpus and the mock image generator.
pub const TEXTURE_FAMILIES: [&str; 10] =
    ["stripes", "columns", "rings", "checker", "blobs", "grid", "speckle", "diagonal", "vignette", "waves"];

/// Renders one grayscale texture of `family` (index into [`TEXTURE_FAMILIES`], wrapping),
/// with `variant` scaling the spatial frequency and `rng` driving the jitter.
pub fn render_texture(family: usize, variant: usize, size: usize, rng: &mut ChaCha8Rng) -> RasterImage {
    use std::f64::consts::TAU;
    let f = family % TEXTURE_FAMILIES.len();
    let freq_scale = 1.0 + 0.5 * variant as f64;
    let phase: f64 = rng.random_range(-0.08..0.08);
    let phase2: f64 = rng.random_range(-0.08..0.08);
    let centre = (0.5 + rng.random_range(-0.03..0.03), 0.5 + rng.random_range(-0.03..0.03));
    let blobs: Vec<(f64, f64)> = [(0.25, 0.25), (0.75, 0.3), (0.5, 0.55), (0.3, 0.78), (0.72, 0.75)]
        .iter()
        .map(|&(x, y)| (x + rng.random_range(-0.04..0.04), y + rng.random_range(-0.04..0.04)))
        .collect();
    let dots: Vec<(f64, f64)> = (0..(12.0 * freq_scale) as usize).map(|_| (rng.random(), rng.random())).collect();
    let noise = Normal::new(0.0, 0.03).expect("valid sigma");
    let mut px = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let base = match f {
                0 => 0.5 + 0.4 * (TAU * (4.0 * freq_scale * v + phase)).sin(),
                1 => 0.5 + 0.4 * (TAU * (4.0 * freq_scale * u + phase)).sin(),
                2 => {
                    let r = ((u - centre.0).powi(2) + (v - centre.1).powi(2)).sqrt();
                    0.5 + 0.4 * (TAU * (5.0 * freq_scale * r + phase)).cos()
                }
                3 => {
                    let s =
                        (TAU * (2.0 * freq_scale * u + phase)).sin() * (TAU * (2.0 * freq_scale * v + phase2)).sin();
                    if s >= 0.0 {
                        0.8
                    } else {
                        0.2
                    }
                }
                4 => {
                    let s: f64 = blobs
                        .iter()
                        .map(|&(bx, by)| {
                            (-((u - bx).powi(2) + (v - by).powi(2)) / (2.0 * 0.07f64.powi(2) / freq_scale)).exp()
                        })
                        .sum();
                    0.1 + 0.8 * s.min(1.0)
                }
                5 => {
                    let period = 1.0 / (5.0 * freq_scale);
                    let du = ((u + phase * period) / period).fract();
                    let dv = ((v + phase2 * period) / period).fract();
                    if du < 0.2 || dv < 0.2 {
                        0.85
                    } else {
                        0.3
                    }
                }
                6 => {
                    let hit = dots.iter().any(|&(dx, dy)| (u - dx).powi(2) + (v - dy).powi(2) < 0.0015);
                    if hit {
                        0.2
                    } else {
                        0.9
                    }
                }
                7 => 0.5 + 0.4 * (TAU * (3.0 * freq_scale * (u + v) + phase)).sin(),
                8 => {
                    let r2 = (u - centre.0).powi(2) + (v - centre.1).powi(2);
                    0.95 * (-r2 / (0.08 / freq_scale)).exp()
                }
                _ => {
                    0.5 + 0.2 * (TAU * (1.5 * freq_scale * u + phase)).sin()
                        + 0.2 * (TAU * (1.5 * freq_scale * v + phase2)).cos()
                }
            };
            px.push((base + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    // quantise so the in-memory raster equals what a PNG round trip yields
    let px = px.into_iter().map(|p| (p * 255.0).round() / 255.0).collect();
    RasterImage::new(size, size, 1, px).expect("rendered texture is valid")
}

/// Category name for synthetic class `i`.
pub fn synthetic_label(i: usize) -> String {
    let family = TEXTURE_FAMILIES[i % TEXTURE_FAMILIES.len()];
    match i / TEXTURE_FAMILIES.len() {
        0 => family.to_string(),
        v => format!("{family}_v{v}"),
    }
}

/// Writes `n_classes × per_class` textures under `out_dir/<label>/` and returns their manifest.
pub fn generate_synthetic_dataset(
    out_dir: &Path,
    n_classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> Result<DatasetManifest, DatasetError> {
    if n_classes < 2 || per_class < 2 || size == 0 {
        return Err(DatasetError::TooSmall);
    }
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        let label = synthetic_label(class);
        let dir = out_dir.join(&label);
        fs::create_dir_all(&dir)?;
        for i in 0..per_class {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ ((class as u64) << 32) ^ (i as u64).wrapping_mul(0x9E37_79B9));
            let img = render_texture(class % TEXTURE_FAMILIES.len(), class / TEXTURE_FAMILIES.len(), size, &mut rng);
            let name = format!("{label}_{i:04}.png");
            let path = dir.join(&name);
            write_atomic(&path, &img.to_png()?)?;
            records.push(ManifestRecord {
                id: format!("{label}/{name}"),
                path: path.to_string_lossy().into_owned(),
                label: label.clone(),
                split: Split::Unassigned,
                hardness: None,
            });
        }
    }
    records.sort_by(|a, b| a.path.cmp(&b.path));
    DatasetManifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(h: usize, w: usize, px: Vec<f64>) -> RasterImage {
        RasterImage::new(h, w, 1, px).unwrap()
    }

    #[test]
    fn constant_image_maps_to_flagged_zeros() {
        let img = gray(4, 4, vec![0.3; 16]);
        let fv = preprocess_mining(&img, &PreprocessConfig::mining(4, 4)).unwrap();
        assert!(fv.constant);
        assert!(fv.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_pixel_zscore_uses_population_variance() {
        let img = gray(2, 1, vec![0.0, 1.0]);
        let fv = preprocess_mining(&img, &PreprocessConfig::mining(2, 1)).unwrap();
        assert!(!fv.constant);
        assert_eq!(fv.values, vec![-1.0, 1.0]);
    }

    #[test]
    fn encoder_mapping_endpoints() {
        let img = gray(1, 3, vec![0.0, 0.5, 1.0]);
        let t = preprocess_encoder(&img, &PreprocessConfig::encoder(1, 3, 1)).unwrap();
        assert_eq!(t.data, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn encoder_output_shape_224() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let px: Vec<f64> = (0..300 * 280 * 3).map(|_| rng.random::<f64>()).collect();
        let img = RasterImage::new(300, 280, 3, px).unwrap();
        let t = preprocess_encoder(&img, &PreprocessConfig::encoder(224, 224, 3)).unwrap();
        assert_eq!((t.height, t.width, t.channels), (224, 224, 3));
        assert!(t.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn grayscale_replicates_to_three_channels() {
        let img = gray(2, 2, vec![0.0, 0.25, 0.5, 1.0]);
        let t = preprocess_encoder(&img, &PreprocessConfig::encoder(2, 2, 3)).unwrap();
        assert_eq!(t.channels, 3);
        assert_eq!(&t.data[3..6], &[-0.5, -0.5, -0.5]);
    }

    #[test]
    fn wrong_mode_is_rejected() {
        let img = gray(2, 2, vec![0.0; 4]);
        assert!(preprocess_encoder(&img, &PreprocessConfig::mining(2, 2)).is_err());
        assert!(preprocess_mining(&img, &PreprocessConfig::encoder(2, 2, 1)).is_err());
    }

    #[test]
    fn encoder_config_requires_patch_divisibility() {
        let cfg = PreprocessConfig::encoder(224, 224, 3);
        assert!(cfg.validate(Some(32)).is_ok());
        assert!(cfg.validate(Some(30)).is_err());
    }

    #[test]
    fn raster_rejects_out_of_range() {
        assert!(RasterImage::new(1, 1, 1, vec![1.5]).is_err());
        assert!(RasterImage::new(1, 1, 2, vec![0.5, 0.5]).is_err());
        assert!(RasterImage::new(2, 1, 1, vec![0.5]).is_err());
    }

    #[test]
    fn png_round_trip_preserves_quantised_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = render_texture(2, 0, 16, &mut rng);
        let back = RasterImage::decode(&img.to_png().unwrap()).unwrap();
        assert_eq!(back, img);
    }
}
