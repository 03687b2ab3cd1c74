//! Hard-example mining: PCA, K-Means, silhouette, rank-based hardness and
//! the stratified hard test split.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, DatasetError, DatasetManifest, PreprocessConfig, RasterImage, Split};
use crate::tensor::{squared_distance, Mat};

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("requested {requested} components but at most {max} are available")]
    TooManyComponents { requested: usize, max: usize },
    #[error("expected {expected} columns, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("K = {k} exceeds the {m} available points")]
    TooManyClusters { k: usize, m: usize },
    #[error("silhouette needs at least two non-empty clusters")]
    SingleCluster,
    #[error("input lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("class {label:?} has {size} image(s); at least 2 are required")]
    ClassTooSmall { label: String, size: usize },
    #[error("record {0:?} has no hardness score")]
    Unscored(String),
    #[error("invalid mining config: {0}")]
    Config(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ComponentCount {
    Fixed {
        n: usize,
    },
    /// Smallest count whose cumulative explained variance reaches `target`, at most `cap`.
    Variance {
        target: f64,
        cap: usize,
    },
}

impl Default for ComponentCount {
    fn default() -> Self {
        ComponentCount::Variance { target: 0.95, cap: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `n_components × D`, orthonormal rows, descending eigenvalue order.
    pub components: Mat,
    pub eigenvalues: Vec<f64>,
    /// Trace of the sample covariance.
    pub total_variance: f64,
    /// All eigenvalues are numerically zero (every row equal).
    pub degenerate: bool,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.rows()
    }

    pub fn explained_variance_ratio(&self) -> f64 {
        if self.total_variance > 0.0 {
            self.eigenvalues.iter().sum::<f64>() / self.total_variance
        } else {
            0.0
        }
    }
}

fn to_dmatrix(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn column_means(x: &Mat) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    let n = x.rows() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Flip so the largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs of the sample covariance, descending. Works on whichever of
/// the `D × D` covariance or the `M × M` Gram matrix is smaller.
fn covariance_eigen(xc: &DMatrix<f64>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (m, d) = xc.shape();
    let denom = (m - 1) as f64;
    if d <= m {
        let cov = (xc.transpose() * xc) / denom;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let vals = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
        let vecs = order.iter().map(|&i| eig.eigenvectors.column(i).iter().copied().collect()).collect();
        (vals, vecs)
    } else {
        let gram = xc * xc.transpose();
        let eig = SymmetricEigen::new(gram);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut vals = Vec::new();
        let mut vecs = Vec::new();
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        for &i in &order {
            let lambda = eig.eigenvalues[i];
            // directions with no variance cannot be recovered from the Gram side
            if lambda <= top * 1e-12 || lambda <= 0.0 {
                break;
            }
            let u = eig.eigenvectors.column(i);
            let v = xc.transpose() * u / lambda.sqrt();
            vals.push(lambda / denom);
            vecs.push(v.iter().copied().collect());
        }
        (vals, vecs)
    }
}

pub fn fit_pca(x: &Mat, count: ComponentCount) -> Result<PcaModel, MiningError> {
    let (m, d) = x.shape();
    if m < 2 {
        return Err(MiningError::TooFewRows(m));
    }
    let limit = m.min(d);
    if let ComponentCount::Fixed { n } = count {
        if n > limit || n == 0 {
            return Err(MiningError::TooManyComponents { requested: n, max: limit });
        }
    }
    let mean = column_means(x);
    let mut xc = to_dmatrix(x);
    for mut row in xc.row_iter_mut() {
        for (v, mu) in row.iter_mut().zip(&mean) {
            *v -= mu;
        }
    }
    let total_variance = xc.iter().map(|v| v * v).sum::<f64>() / (m - 1) as f64;
    let (vals, vecs) = covariance_eigen(&xc);
    let degenerate = total_variance <= 1e-24 || vals.first().is_none_or(|&v| v <= 0.0);

    let wanted = match count {
        ComponentCount::Fixed { n } => n,
        ComponentCount::Variance { target, cap } => {
            let mut acc = 0.0;
            let mut n = vals.len();
            for (i, v) in vals.iter().enumerate() {
                acc += v;
                if acc >= target * total_variance {
                    n = i + 1;
                    break;
                }
            }
            n.clamp(1, cap.max(1)).min(limit)
        }
    };

    let mut rows = Vec::with_capacity(wanted);
    let mut eigenvalues = Vec::with_capacity(wanted);
    for i in 0..wanted {
        match vecs.get(i) {
            Some(v) if !degenerate => {
                let mut v = v.clone();
                fix_sign(&mut v);
                rows.push(v);
                eigenvalues.push(vals[i]);
            }
            _ => {
                // zero-variance directions: complete the basis deterministically
                rows.push(complete_basis(&rows, d));
                eigenvalues.push(0.0);
            }
        }
    }
    Ok(PcaModel { mean, components: Mat::from_rows(&rows), eigenvalues, total_variance, degenerate })
}

/// First standard basis vector, Gram-Schmidt orthogonalised against `rows`,
/// that leaves a usable residual.
fn complete_basis(rows: &[Vec<f64>], d: usize) -> Vec<f64> {
    for e in 0..d {
        let mut v = vec![0.0; d];
        v[e] = 1.0;
        for r in rows {
            let p: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|x| *x /= n);
            fix_sign(&mut v);
            return v;
        }
    }
    unreachable!("fewer than D rows always leave a residual direction")
}

/// `Z = (X − mean) · componentsᵀ`.
pub fn project(model: &PcaModel, x: &Mat) -> Result<Mat, MiningError> {
    if x.cols() != model.mean.len() {
        return Err(MiningError::DimMismatch { expected: model.mean.len(), got: x.cols() });
    }
    let mut xc = to_dmatrix(x);
    for mut row in xc.row_iter_mut() {
        for (v, mu) in row.iter_mut().zip(&model.mean) {
            *v -= mu;
        }
    }
    let z = xc * to_dmatrix(&model.components).transpose();
    let mut out = Mat::zeros(z.nrows(), z.ncols());
    for r in 0..z.nrows() {
        for c in 0..z.ncols() {
            out.set(r, c, z[(r, c)]);
        }
    }
    Ok(out)
}

/// `X ≈ Z · components + mean`.
pub fn reconstruct(model: &PcaModel, z: &Mat) -> Mat {
    let mut x = z.matmul(&model.components);
    for r in 0..x.rows() {
        for (v, mu) in x.row_mut(r).iter_mut().zip(&model.mean) {
            *v += mu;
        }
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step, in order.
    pub inertia_history: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self { k: 10, seed: 0, max_iters: 300, tol: 1e-4 }
    }
}

/// Nearest centroid per point; ties go to the lowest cluster id.
fn assign(z: &Mat, centroids: &Mat) -> (Vec<usize>, Vec<f64>) {
    (0..z.rows())
        .into_par_iter()
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for c in 0..centroids.rows() {
                let d = squared_distance(z.row(i), centroids.row(c));
                if d < best.1 {
                    best = (c, d);
                }
            }
            best
        })
        .unzip()
}

fn kmeans_plus_plus(z: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let m = z.rows();
    let mut chosen = vec![rng.random_range(0..m)];
    let mut d2: Vec<f64> = (0..m).map(|i| squared_distance(z.row(i), z.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = m - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            // guard against rounding landing on an already chosen point
            if d2[pick] == 0.0 {
                (0..m).rev().find(|&i| d2[i] > 0.0).unwrap_or(pick)
            } else {
                pick
            }
        } else {
            // all remaining points coincide with a centre; take the next unused index
            (0..m).find(|i| !chosen.contains(i)).expect("k <= m")
        };
        chosen.push(next);
        for (i, v) in d2.iter_mut().enumerate() {
            *v = v.min(squared_distance(z.row(i), z.row(next)));
        }
    }
    let rows: Vec<Vec<f64>> = chosen.iter().map(|&i| z.row(i).to_vec()).collect();
    Mat::from_rows(&rows)
}

/// Lloyd iterations from k-means++ seeding.
pub fn kmeans(z: &Mat, cfg: &KMeansConfig) -> Result<ClusterModel, MiningError> {
    let m = z.rows();
    if cfg.k == 0 || cfg.k > m {
        return Err(MiningError::TooManyClusters { k: cfg.k, m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = kmeans_plus_plus(z, cfg.k, &mut rng);
    kmeans_from(z, init, cfg.max_iters, cfg.tol)
}

/// Lloyd iterations from explicit initial centroids.
pub fn kmeans_from(z: &Mat, init: Mat, max_iters: usize, tol: f64) -> Result<ClusterModel, MiningError> {
    let (m, dim) = z.shape();
    let k = init.rows();
    if k == 0 || k > m {
        return Err(MiningError::TooManyClusters { k, m });
    }
    if init.cols() != dim {
        return Err(MiningError::DimMismatch { expected: dim, got: init.cols() });
    }
    let mut centroids = init;
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let (assignments, d2) = assign(z, &centroids);
        history.push(d2.iter().sum());

        let mut sums = Mat::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        let mut taken: Vec<usize> = Vec::new();
        let mut next = Mat::zeros(k, dim);
        for c in 0..k {
            if counts[c] > 0 {
                for (o, s) in next.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *o = s / counts[c] as f64;
                }
            } else {
                // re-seed at the point farthest from its current centroid
                let far = (0..m)
                    .filter(|i| !taken.contains(i))
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a)))
                    .expect("k <= m leaves a point");
                taken.push(far);
                next.row_mut(c).copy_from_slice(z.row(far));
            }
        }
        let shift = (0..k).map(|c| squared_distance(next.row(c), centroids.row(c)).sqrt()).fold(0.0, f64::max);
        centroids = next;
        if shift <= tol {
            converged = true;
            break;
        }
    }
    let (assignments, d2) = assign(z, &centroids);
    let inertia: f64 = d2.iter().sum();
    history.push(inertia);
    Ok(ClusterModel { centroids, assignments, inertia, iterations, inertia_history: history, converged })
}

/// Euclidean distance from every point to its assigned centroid.
pub fn centroid_distances(z: &Mat, model: &ClusterModel) -> Vec<f64> {
    (0..z.rows()).map(|i| squared_distance(z.row(i), model.centroids.row(model.assignments[i])).sqrt()).collect()
}

/// Per-point silhouette; members of singleton clusters score 0.
pub fn silhouette(z: &Mat, assignments: &[usize]) -> Result<Vec<f64>, MiningError> {
    let m = z.rows();
    if assignments.len() != m {
        return Err(MiningError::LengthMismatch(assignments.len(), m));
    }
    let k = assignments.iter().max().map_or(0, |x| x + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(MiningError::SingleCluster);
    }
    Ok((0..m)
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; k];
            for j in 0..m {
                if j != i {
                    sums[assignments[j]] += squared_distance(z.row(i), z.row(j)).sqrt();
                }
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..k)
                .filter(|&c| c != own && sizes[c] > 0)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let denom = a.max(b);
            if denom > 0.0 {
                ((b - a) / denom).clamp(-1.0, 1.0)
            } else {
                0.0
            }
        })
        .collect())
}

/// 0-based ranks in ascending order of `key`, averaged over ties.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-combined hardness in `[0, 1]`: far from the centroid and poorly
/// silhouetted points approach 1.
pub fn hardness_scores(distances: &[f64], silhouettes: &[f64]) -> Result<Vec<f64>, MiningError> {
    if distances.len() != silhouettes.len() {
        return Err(MiningError::LengthMismatch(distances.len(), silhouettes.len()));
    }
    let m = distances.len();
    if m <= 1 {
        return Ok(vec![0.5; m]);
    }
    let rd = average_ranks(distances);
    let neg: Vec<f64> = silhouettes.iter().map(|s| -s).collect();
    let rs = average_ranks(&neg);
    let denom = 2.0 * (m - 1) as f64;
    Ok(rd.iter().zip(&rs).map(|(a, b)| (a + b) / denom).collect())
}

/// Per class, the `ceil(fraction · size)` hardest records go to test (ties by
/// id); everything else is train. Hardness values are written onto the records.
pub fn make_split(
    manifest: &DatasetManifest,
    hardness: &BTreeMap<String, f64>,
    fraction: f64,
) -> Result<DatasetManifest, MiningError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MiningError::Config(format!("test fraction {fraction} must be in [0, 1)")));
    }
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_label.entry(r.label.as_str()).or_default().push(i);
    }
    let mut out = manifest.clone();
    for (label, idx) in by_label {
        if idx.len() < 2 {
            return Err(MiningError::ClassTooSmall { label: label.to_string(), size: idx.len() });
        }
        let mut scored = Vec::with_capacity(idx.len());
        for &i in &idx {
            let id = &manifest.records[i].id;
            let h = *hardness.get(id).ok_or_else(|| MiningError::Unscored(id.clone()))?;
            scored.push((i, h));
        }
        scored
            .sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| manifest.records[a.0].id.cmp(&manifest.records[b.0].id)));
        // tolerate representation error such as 0.1 * 30 = 3.0000000000000004
        let n_test = ((fraction * idx.len() as f64) - 1e-9).ceil().max(0.0) as usize;
        for (rank, &(i, h)) in scored.iter().enumerate() {
            let rec = &mut out.records[i];
            rec.hardness = Some(h);
            rec.split = if rank < n_test { Split::Test } else { Split::Train };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MiningConfig {
    pub clusters: usize,
    pub test_fraction: f64,
    pub components: ComponentCount,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Resolution images are resized to before z-scoring.
    pub height: usize,
    pub width: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            clusters: 10,
            test_fraction: 0.10,
            components: ComponentCount::default(),
            seed: 0,
            max_iters: 300,
            tol: 1e-4,
            height: 224,
            width: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessRecord {
    pub id: String,
    pub cluster: usize,
    pub centroid_distance: f64,
    pub silhouette: f64,
    pub hardness: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningSummary {
    pub images: usize,
    pub constant_images: usize,
    pub components: usize,
    pub explained_variance: f64,
    pub degenerate: bool,
    pub clusters: usize,
    pub inertia: f64,
    pub kmeans_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub manifest: DatasetManifest,
    pub report: Vec<HardnessRecord>,
    pub summary: MiningSummary,
}

/// Runs the whole mining stage over every record of `manifest`.
pub fn mine(manifest: &DatasetManifest, cfg: &MiningConfig) -> Result<MiningOutcome, MiningError> {
    let m = manifest.records.len();
    if m < 2 {
        return Err(MiningError::TooFewRows(m));
    }
    let pre = PreprocessConfig::mining(cfg.height, cfg.width);
    let feats = manifest
        .records
        .par_iter()
        .map(|r| io::preprocess_mining(&RasterImage::open(Path::new(&r.path))?, &pre))
        .collect::<Result<Vec<_>, _>>()?;
    let d = feats[0].values.len();
    if let Some(f) = feats.iter().find(|f| f.values.len() != d) {
        return Err(MiningError::DimMismatch { expected: d, got: f.values.len() });
    }
    let constant_images = feats.iter().filter(|f| f.constant).count();
    let mut x = Mat::zeros(m, d);
    for (i, f) in feats.iter().enumerate() {
        x.row_mut(i).copy_from_slice(&f.values);
    }
    drop(feats);

    let pca = fit_pca(&x, cfg.components)?;
    let z = project(&pca, &x)?;
    let k = cfg.clusters.min(m);
    let clusters = kmeans(&z, &KMeansConfig { k, seed: cfg.seed, max_iters: cfg.max_iters, tol: cfg.tol })?;
    let dist = centroid_distances(&z, &clusters);
    let sil = match silhouette(&z, &clusters.assignments) {
        Ok(s) => s,
        Err(MiningError::SingleCluster) => vec![0.0; m],
        Err(e) => return Err(e),
    };
    let hard = hardness_scores(&dist, &sil)?;
    let scores: BTreeMap<String, f64> =
        manifest.records.iter().map(|r| r.id.clone()).zip(hard.iter().copied()).collect();
    let split = make_split(manifest, &scores, cfg.test_fraction)?;
    let report = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| HardnessRecord {
            id: r.id.clone(),
            cluster: clusters.assignments[i],
            centroid_distance: dist[i],
            silhouette: sil[i],
            hardness: hard[i],
        })
        .collect();
    let summary = MiningSummary {
        images: m,
        constant_images,
        components: pca.n_components(),
        explained_variance: pca.explained_variance_ratio(),
        degenerate: pca.degenerate,
        clusters: k,
        inertia: clusters.inertia,
        kmeans_iterations: clusters.iterations,
    };
    Ok(MiningOutcome { manifest: split, report, summary })
}
