//! Python bindings: `import nmid`.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use nmid_core::encoder::{forward, EncoderCheckpoint};
use nmid_core::eval::PredictionRecord;
use nmid_core::index::{self, Metric};
use nmid_core::io::{self, DatasetManifest, PreprocessConfig, RasterImage, Split};
use nmid_core::mining::{self, KMeansConfig, MiningConfig};
use nmid_core::prompts;
use nmid_core::tensor::Mat;
use nmid_core::train;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Mat> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(err("rows have different lengths"));
    }
    Ok(Mat::from_rows(rows))
}

/// NT-Xent loss; row i pairs with row i + n/2.
#[pyfunction]
#[pyo3(signature = (rows, tau = 0.5))]
fn nt_xent(rows: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    if rows.len() % 2 != 0 {
        return Err(err("need an even number of rows"));
    }
    train::nt_xent(&matrix(&rows)?, &train::halves_pairing(rows.len() / 2), tau).map_err(err)
}

/// Returns `(assignments, inertia)`.
#[pyfunction]
#[pyo3(signature = (rows, k, seed = 0))]
fn kmeans(rows: Vec<Vec<f64>>, k: usize, seed: u64) -> PyResult<(Vec<usize>, f64)> {
    let m = mining::kmeans(&matrix(&rows)?, &KMeansConfig { k, seed, ..KMeansConfig::default() }).map_err(err)?;
    Ok((m.assignments, m.inertia))
}

#[pyfunction]
fn silhouette(rows: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<Vec<f64>> {
    mining::silhouette(&matrix(&rows)?, &labels).map_err(err)
}

#[pyclass(name = "Manifest", module = "nmid")]
struct PyManifest(DatasetManifest);

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        DatasetManifest::read_jsonl(&path).map(Self).map_err(err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.0.write_jsonl(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.0.labels.clone()
    }

    /// `(id, path, label, split)` tuples; `split` filters to "train" or "test".
    #[pyo3(signature = (split = None))]
    fn records(&self, split: Option<&str>) -> PyResult<Vec<(String, String, String, String)>> {
        let want = match split {
            None => None,
            Some("train") => Some(Split::Train),
            Some("test") => Some(Split::Test),
            Some(s) => return Err(err(format!("unknown split {s:?}"))),
        };
        Ok(self
            .0
            .records
            .iter()
            .filter(|r| want.is_none_or(|w| r.split == w))
            .map(|r| {
                let split = if r.split == Split::Train { "train" } else { "test" };
                (r.id.clone(), r.path.clone(), r.label.clone(), split.to_string())
            })
            .collect())
    }

    fn hardness(&self) -> Vec<Option<f64>> {
        self.0.records.iter().map(|r| r.hardness).collect()
    }
}

/// Writes a seeded synthetic micrograph corpus, one directory per class.
#[pyfunction]
#[pyo3(signature = (out_dir, classes = 10, per_class = 200, size = 64, seed = 7))]
fn generate_dataset(
    out_dir: PathBuf,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
) -> PyResult<PyManifest> {
    io::generate_synthetic_dataset(&out_dir, classes, per_class, size, seed).map(PyManifest).map_err(err)
}

/// Hard-example mining; returns the manifest with splits and hardness filled in.
#[pyfunction]
#[pyo3(signature = (manifest, clusters = 10, test_fraction = 0.1, size = 64, seed = 0))]
fn mine(manifest: &PyManifest, clusters: usize, test_fraction: f64, size: usize, seed: u64) -> PyResult<PyManifest> {
    let cfg = MiningConfig { clusters, test_fraction, height: size, width: size, seed, ..MiningConfig::default() };
    Ok(PyManifest(mining::mine(&manifest.0, &cfg).map_err(err)?.manifest))
}

#[pyclass(name = "Encoder", module = "nmid", frozen)]
struct PyEncoder(EncoderCheckpoint);

#[pymethods]
impl PyEncoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        EncoderCheckpoint::load(&path).map(Self).map_err(err)
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.0.config.embed_dim
    }

    /// Embedding of the image file at `path`.
    fn embed(&self, py: Python<'_>, path: PathBuf) -> PyResult<Vec<f64>> {
        let c = &self.0.config;
        let pre = PreprocessConfig::encoder(c.image_height, c.image_width, c.channels);
        py.detach(|| {
            let img = io::preprocess_encoder(&RasterImage::open(&path).map_err(err)?, &pre).map_err(err)?;
            Ok(forward(&img, &self.0.params, c).map_err(err)?.0)
        })
    }
}

#[pyclass(name = "EmbeddingStore", module = "nmid", frozen)]
struct PyStore(index::EmbeddingStore);

fn metric(name: &str) -> PyResult<Metric> {
    name.parse().map_err(err)
}

#[pymethods]
impl PyStore {
    #[new]
    #[pyo3(signature = (ids, rows, metric = "cosine"))]
    fn new(ids: Vec<String>, rows: Vec<Vec<f64>>, metric: &str) -> PyResult<Self> {
        index::EmbeddingStore::new(ids, matrix(&rows)?, self::metric(metric)?).map(Self).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        index::EmbeddingStore::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.0.ids().to_vec()
    }

    fn get(&self, id: &str) -> Option<Vec<f64>> {
        self.0.get(id).map(<[f64]>::to_vec)
    }

    /// `(id, score)` pairs, most similar first.
    #[pyo3(signature = (query, k, metric = None))]
    fn top_k(&self, query: Vec<f64>, k: usize, metric: Option<&str>) -> PyResult<Vec<(String, f64)>> {
        let m = metric.map(self::metric).transpose()?.unwrap_or(self.0.metric());
        let hits = index::top_k_similar(&self.0, &query, k, m).map_err(err)?;
        Ok(hits.into_iter().map(|n| (n.id, n.score.unwrap_or(f64::NAN))).collect())
    }

    fn sample_random(&self, k: usize, seed: u64) -> PyResult<Vec<String>> {
        Ok(index::sample_random(&self.0, k, seed).map_err(err)?.into_iter().map(|n| n.id).collect())
    }
}

#[pyfunction]
fn cot_prompts() -> Vec<(u32, String)> {
    prompts::cot_prompts().iter().map(|(id, text)| (id as u32, text.to_string())).collect()
}

/// Scores `(image_id, true_label, ranked_predictions)` triples against `labels`.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    records: Vec<(String, String, Vec<String>)>,
    labels: Vec<String>,
) -> PyResult<Bound<'py, PyDict>> {
    let recs: Vec<PredictionRecord> = records
        .into_iter()
        .map(|(image_id, true_label, predicted)| PredictionRecord { image_id, true_label, predicted, raw: None })
        .collect();
    let r = nmid_core::eval::evaluate(&recs, &labels).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("records", r.records)?;
    out.set_item("top_n", r.top_n)?;
    out.set_item("macro_precision", r.macro_precision)?;
    out.set_item("macro_recall", r.macro_recall)?;
    out.set_item("macro_f1", r.macro_f1)?;
    out.set_item("micro_recall", r.micro_recall)?;
    out.set_item("confusion", r.confusion.counts.clone())?;
    let per_class = PyDict::new(py);
    for c in &r.per_class {
        per_class.set_item(&c.label, (c.precision, c.recall, c.f1, c.support))?;
    }
    out.set_item("per_class", per_class)?;
    Ok(out)
}

#[pymodule]
fn nmid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyManifest>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyStore>()?;
    m.add_function(wrap_pyfunction!(nt_xent, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(mine, m)?)?;
    m.add_function(wrap_pyfunction!(cot_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
