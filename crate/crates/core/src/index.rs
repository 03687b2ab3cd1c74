//! Exact embedding store over `h_cls` vectors: cosine or Euclidean top-K and
//! the seeded random baseline.

use std::cmp::Ordering;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blob::{self, BlobError};
use crate::encoder::{forward, EncoderCheckpoint, EncoderError};
use crate::io::{self, DatasetError, DatasetManifest, LoadWarning, PreprocessConfig, RasterImage, Split};
use crate::tensor::{dot, norm, squared_distance, Mat};

pub const STORE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("no embeddings to index")]
    Empty,
    #[error("{ids} ids for {rows} rows")]
    RowMismatch { ids: usize, rows: usize },
    #[error("row {0} is not finite")]
    NonFinite(usize),
    #[error("zero-norm vector under cosine similarity")]
    ZeroVector,
    #[error("expected dimension {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("cannot sample {k} of {m} ids without replacement")]
    TooMany { k: usize, m: usize },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("store file: {0}")]
    Format(String),
    #[error(transparent)]
    Blob(#[from] BlobError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(format!("unknown metric {other:?} (expected cosine or euclidean)")),
        }
    }
}

/// Id-aligned embedding matrix with cached row norms.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    matrix: Mat,
    norms: Vec<f64>,
    metric: Metric,
}

/// One retrieved neighbour. `score` is cosine similarity or Euclidean
/// distance, and absent for random draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: String,
    pub score: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreHeader {
    version: u32,
    d: usize,
    metric: Metric,
    ids: Vec<String>,
    dtype: String,
}

impl EmbeddingStore {
    pub fn new(ids: Vec<String>, matrix: Mat, metric: Metric) -> Result<Self, IndexError> {
        if ids.is_empty() {
            return Err(IndexError::Empty);
        }
        if ids.len() != matrix.rows() {
            return Err(IndexError::RowMismatch { ids: ids.len(), rows: matrix.rows() });
        }
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(IndexError::DuplicateId(id.clone()));
            }
        }
        for r in 0..matrix.rows() {
            if !matrix.row(r).iter().all(|v| v.is_finite()) {
                return Err(IndexError::NonFinite(r));
            }
        }
        let norms = (0..matrix.rows()).map(|r| norm(matrix.row(r))).collect();
        Ok(Self { ids, matrix, norms, metric })
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn matrix(&self) -> &Mat {
        &self.matrix
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.position(id).map(|i| self.matrix.row(i))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IndexError> {
        let header = StoreHeader {
            version: STORE_VERSION,
            d: self.dim(),
            metric: self.metric,
            ids: self.ids.clone(),
            dtype: "f32".into(),
        };
        let mut payload = Vec::with_capacity(self.matrix.data().len() * 4);
        blob::f32s_to_le(self.matrix.data().iter().map(|&v| v as f32), &mut payload);
        Ok(blob::encode(&header, &payload)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let (raw, payload) = blob::split(bytes)?;
        let header: StoreHeader = blob::parse_header(raw)?;
        if header.version != STORE_VERSION {
            return Err(IndexError::Format(format!("unsupported version {}", header.version)));
        }
        if header.dtype != "f32" {
            return Err(IndexError::Format(format!("unsupported dtype {:?}", header.dtype)));
        }
        let expected = header.ids.len() * header.d * 4;
        if payload.len() != expected {
            return Err(IndexError::Format(format!("payload is {} bytes, expected {expected}", payload.len())));
        }
        let data = blob::le_to_f32s(payload).into_iter().map(f64::from).collect();
        Self::new(header.ids.clone(), Mat::from_vec(header.ids.len(), header.d, data), header.metric)
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        io::write_atomic(path, &self.to_bytes()?).map_err(BlobError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&blob::read(path)?)
    }

    /// Same ids and metric with every row rounded through `f32`, as a save/load
    /// round trip would produce.
    pub fn quantized(&self) -> Self {
        let data = self.matrix.data().iter().map(|&v| v as f32 as f64).collect();
        Self::new(self.ids.clone(), Mat::from_vec(self.len(), self.dim(), data), self.metric).expect("same shape")
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, IndexError> {
    if a.len() != b.len() {
        return Err(IndexError::DimMismatch { expected: a.len(), got: b.len() });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    Ok(dot(a, b) / (na * nb))
}

/// Exact top-`k` by full scan. Cosine ranks by descending similarity,
/// Euclidean by ascending distance; ties go to the smaller id.
pub fn top_k_similar(
    store: &EmbeddingStore,
    query: &[f64],
    k: usize,
    metric: Metric,
) -> Result<Vec<Neighbor>, IndexError> {
    if query.len() != store.dim() {
        return Err(IndexError::DimMismatch { expected: store.dim(), got: query.len() });
    }
    let qn = norm(query);
    if metric == Metric::Cosine && qn == 0.0 {
        return Err(IndexError::ZeroVector);
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut scored: Vec<(usize, f64)> = (0..store.len())
        .into_par_iter()
        .map(|i| {
            let row = store.matrix.row(i);
            let s = match metric {
                // a zero stored row has no direction; rank it as orthogonal
                Metric::Cosine if store.norms[i] == 0.0 => 0.0,
                Metric::Cosine => dot(row, query) / (store.norms[i] * qn),
                Metric::Euclidean => squared_distance(row, query).sqrt(),
            };
            (i, s)
        })
        .collect();
    let ids = &store.ids;
    let cmp = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        let by_score = match metric {
            Metric::Cosine => b.1.total_cmp(&a.1),
            Metric::Euclidean => a.1.total_cmp(&b.1),
        };
        by_score.then_with(|| ids[a.0].cmp(&ids[b.0]))
    };
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    Ok(scored.into_iter().map(|(i, s)| Neighbor { id: ids[i].clone(), score: Some(s) }).collect())
}

/// `k` distinct ids drawn uniformly without replacement.
pub fn sample_random(store: &EmbeddingStore, k: usize, seed: u64) -> Result<Vec<Neighbor>, IndexError> {
    if k > store.len() {
        return Err(IndexError::TooMany { k, m: store.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, store.len(), k)
        .into_iter()
        .map(|i| Neighbor { id: store.ids[i].clone(), score: None })
        .collect())
}

/// Embeds every train-split image with the checkpoint's encoder.
/// Undecodable images are skipped and reported.
pub fn build_index(
    manifest: &DatasetManifest,
    ckpt: &EncoderCheckpoint,
    pre: &PreprocessConfig,
    metric: Metric,
) -> Result<(EmbeddingStore, Vec<LoadWarning>), IndexError> {
    let train = manifest.split(Split::Train);
    if train.is_empty() {
        return Err(IndexError::Empty);
    }
    pre.validate(Some(ckpt.config.patch_size))?;
    let results: Vec<Result<Vec<f64>, LoadWarning>> = train
        .records
        .par_iter()
        .map(|r| {
            let warn = |reason: String| LoadWarning { path: r.path.clone().into(), reason };
            let raster = RasterImage::open(Path::new(&r.path)).map_err(|e| warn(e.to_string()))?;
            let img = io::preprocess_encoder(&raster, pre).map_err(|e| warn(e.to_string()))?;
            forward(&img, &ckpt.params, &ckpt.config).map(|e| e.0).map_err(|e| warn(e.to_string()))
        })
        .collect();
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (r, res) in train.records.iter().zip(results) {
        match res {
            Ok(v) => {
                ids.push(r.id.clone());
                rows.push(v);
            }
            Err(w) => {
                log::warn!("skipping {}: {}", w.path.display(), w.reason);
                warnings.push(w);
            }
        }
    }
    if rows.is_empty() {
        return Err(IndexError::Empty);
    }
    Ok((EmbeddingStore::new(ids, Mat::from_rows(&rows), metric)?, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(rows: &[&[f64]]) -> EmbeddingStore {
        let ids = (0..rows.len()).map(|i| format!("img{i:02}")).collect();
        EmbeddingStore::new(ids, Mat::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()), Metric::Cosine)
            .unwrap()
    }

    #[test]
    fn cosine_basics() {
        let z = [0.3, -2.0, 5.5];
        assert!((cosine(&z, &z).unwrap() - 1.0).abs() <= 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        // 32 / (sqrt(14) sqrt(77))
        assert!((cosine(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - 0.974_631_846_197_075_8).abs() <= 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(IndexError::ZeroVector)));
    }

    #[test]
    fn k_zero_and_k_beyond_m() {
        let s = store(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(top_k_similar(&s, &[1.0, 0.0], 0, Metric::Cosine).unwrap().is_empty());
        assert_eq!(top_k_similar(&s, &[1.0, 0.0], 10, Metric::Cosine).unwrap().len(), 3);
    }

    #[test]
    fn stored_row_ranks_first() {
        let s = store(&[&[1.0, 0.0], &[0.2, 1.0], &[1.0, 1.0]]);
        let top = top_k_similar(&s, &[0.2, 1.0], 1, Metric::Cosine).unwrap();
        assert_eq!(top[0].id, "img01");
        assert!((top[0].score.unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id() {
        let s = store(&[&[1.0, 0.0], &[2.0, 0.0], &[0.0, 1.0]]);
        let top = top_k_similar(&s, &[1.0, 0.0], 2, Metric::Cosine).unwrap();
        assert_eq!(top.iter().map(|n| n.id.as_str()).collect::<Vec<_>>(), ["img00", "img01"]);
    }

    #[test]
    fn zero_query_is_an_error_for_cosine_only() {
        let s = store(&[&[1.0, 0.0]]);
        assert!(matches!(top_k_similar(&s, &[0.0, 0.0], 1, Metric::Cosine), Err(IndexError::ZeroVector)));
        assert!(top_k_similar(&s, &[0.0, 0.0], 1, Metric::Euclidean).is_ok());
    }

    #[test]
    fn random_sampling_contract() {
        let s = store(&[&[1.0], &[2.0], &[3.0], &[4.0]]);
        let all = sample_random(&s, 4, 1).unwrap();
        let mut ids: Vec<_> = all.iter().map(|n| n.id.clone()).collect();
        ids.sort();
        assert_eq!(ids, s.ids());
        assert_eq!(sample_random(&s, 2, 9).unwrap(), sample_random(&s, 2, 9).unwrap());
        assert!(matches!(sample_random(&s, 5, 0), Err(IndexError::TooMany { .. })));
    }

    #[test]
    fn store_file_round_trip() {
        let s = store(&[&[1.5, -0.25], &[0.1, 3.0]]);
        let bytes = s.to_bytes().unwrap();
        let back = EmbeddingStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s.quantized());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let header: serde_json::Value = serde_json::from_slice(blob::split(&bytes).unwrap().0).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["d"], 2);
        assert!(EmbeddingStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn construction_checks() {
        let m = Mat::from_rows(&[vec![1.0], vec![f64::NAN]]);
        assert!(matches!(
            EmbeddingStore::new(vec!["a".into(), "b".into()], m, Metric::Cosine),
            Err(IndexError::NonFinite(1))
        ));
        let m = Mat::from_rows(&[vec![1.0], vec![2.0]]);
        assert!(matches!(
            EmbeddingStore::new(vec!["a".into(), "a".into()], m.clone(), Metric::Cosine),
            Err(IndexError::DuplicateId(_))
        ));
        assert!(matches!(
            EmbeddingStore::new(vec!["a".into()], m, Metric::Cosine),
            Err(IndexError::RowMismatch { .. })
        ));
    }
}
