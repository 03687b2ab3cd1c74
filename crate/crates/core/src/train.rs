//! Self-supervised encoder training: two-view augmentation, NT-Xent,
//! exact gradients through the encoder tape, Adam, and plateau scheduling.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{forward_graph, EncoderCheckpoint, EncoderConfig, EncoderError, ParameterSet};
use crate::io::{self, DatasetError, DatasetManifest, ImageTensor, PreprocessConfig, RasterImage, Split};
use crate::tensor::{dot, norm, Mat};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("NT-Xent needs at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("embedding {0} has zero norm")]
    ZeroNorm(usize),
    #[error("pairing is not a perfect matching: {0}")]
    BadPairing(String),
    #[error("non-finite {what} at epoch {epoch}")]
    Divergent { what: &'static str, epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("train split is empty")]
    EmptySplit,
    #[error("parameter layouts differ")]
    ShapeMismatch,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Crop side length as a fraction of the image side, drawn uniformly.
    pub crop_scale_range: (f64, f64),
    pub flip_prob: f64,
    /// Gaussian noise sigma in `[0, 1]` pixel units.
    pub noise_sigma: f64,
    /// Maximum absolute brightness shift in `[0, 1]` pixel units.
    pub brightness_delta: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { crop_scale_range: (0.6, 1.0), flip_prob: 0.5, noise_sigma: 0.02, brightness_delta: 0.1, seed: 0 }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self { crop_scale_range: (1.0, 1.0), flip_prob: 0.0, noise_sigma: 0.0, brightness_delta: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(TrainError::Config(format!("crop_scale_range {lo}..{hi} must lie within (0, 1]")));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(TrainError::Config("flip_prob must be in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 || self.brightness_delta < 0.0 {
            return Err(TrainError::Config("noise_sigma and brightness_delta must be >= 0".into()));
        }
        Ok(())
    }
}

fn augment_one(img: &ImageTensor, cfg: &AugmentationConfig, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (h, w, c) = (img.height, img.width, img.channels);
    let (lo, hi) = cfg.crop_scale_range;
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let ch = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let y0 = if h > ch { rng.random_range(0..=h - ch) } else { 0 };
    let x0 = if w > cw { rng.random_range(0..=w - cw) } else { 0 };
    let mut crop = Vec::with_capacity(ch * cw * c);
    for y in y0..y0 + ch {
        crop.extend_from_slice(&img.data[(y * w + x0) * c..(y * w + x0 + cw) * c]);
    }
    let mut data = io::resize_bilinear(&crop, ch, cw, c, h, w);

    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        for y in 0..h {
            let row = &mut data[y * w * c..(y + 1) * w * c];
            for x in 0..w / 2 {
                for k in 0..c {
                    row.swap(x * c + k, (w - 1 - x) * c + k);
                }
            }
        }
    }
    // [0,1] pixel units are doubled in the [-1,1] tensor space
    let shift = if cfg.brightness_delta > 0.0 {
        2.0 * rng.random_range(-cfg.brightness_delta..=cfg.brightness_delta)
    } else {
        0.0
    };
    let noise = (cfg.noise_sigma > 0.0).then(|| Normal::new(0.0, 2.0 * cfg.noise_sigma).expect("valid sigma"));
    for v in &mut data {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
        *v = (*v + shift + n).clamp(-1.0, 1.0);
    }
    ImageTensor::new(h, w, c, data)
}

/// Two independent augmented views of `img`, deterministic given `rng`.
pub fn augment_two_views(
    img: &ImageTensor,
    cfg: &AugmentationConfig,
    rng: &mut ChaCha8Rng,
) -> (ImageTensor, ImageTensor) {
    let a = augment_one(img, cfg, rng);
    let b = augment_one(img, cfg, rng);
    (a, b)
}

/// Positive-pair map for `2n` embeddings laid out as `[view1 ..., view2 ...]`.
pub fn halves_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|k| (k + n) % (2 * n)).collect()
}

fn check_pairing(pairing: &[usize]) -> Result<(), TrainError> {
    for (k, &p) in pairing.iter().enumerate() {
        if p >= pairing.len() || p == k || pairing[p] != k {
            return Err(TrainError::BadPairing(format!("index {k} -> {p}")));
        }
    }
    Ok(())
}

/// NT-Xent loss and its gradient with respect to each embedding row.
///
/// For row `k` with positive `k⁺` the term is
/// `-s(k,k⁺)/τ + log Σ_{l∉{k,k⁺}} exp(s(k,l)/τ)` with cosine `s`; the loss is
/// the mean over all `2N` rows.
pub fn nt_xent_with_grad(z: &Mat, pairing: &[usize], tau: f64) -> Result<(f64, Mat), TrainError> {
    let m = z.rows();
    if pairing.len() != m {
        return Err(TrainError::BadPairing(format!("{} pairs for {m} rows", pairing.len())));
    }
    if m < 4 {
        return Err(TrainError::TooFewPairs(m / 2));
    }
    if tau <= 0.0 {
        return Err(TrainError::Config("temperature must be > 0".into()));
    }
    check_pairing(pairing)?;
    let d = z.cols();
    let mut u = Mat::zeros(m, d);
    let mut norms = Vec::with_capacity(m);
    for k in 0..m {
        let nk = norm(z.row(k));
        if nk == 0.0 || !nk.is_finite() {
            return Err(TrainError::ZeroNorm(k));
        }
        for (o, v) in u.row_mut(k).iter_mut().zip(z.row(k)) {
            *o = v / nk;
        }
        norms.push(nk);
    }
    let mut s = u.matmul_t(&u);
    s.scale(1.0 / tau);

    // g(k,l) = ∂loss/∂s(k,l), treating each (k,l) entry as independent
    let mut g = Mat::zeros(m, m);
    let mut loss = 0.0;
    let inv = 1.0 / m as f64;
    for k in 0..m {
        let kp = pairing[k];
        let row = s.row(k);
        let max = (0..m).filter(|&l| l != k && l != kp).map(|l| row[l]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = (0..m).filter(|&l| l != k && l != kp).map(|l| (row[l] - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[kp];
        for l in 0..m {
            if l == k {
                continue;
            }
            let v = if l == kp { -inv } else { inv * (row[l] - lse).exp() };
            g.set(k, l, v);
        }
    }
    loss *= inv;

    let mut sym = g.clone();
    sym.add_assign(&g.transpose());
    let mut du = sym.matmul(&u);
    du.scale(1.0 / tau);
    let mut dz = Mat::zeros(m, d);
    for k in 0..m {
        let uk = u.row(k);
        let duk = du.row(k);
        let radial = dot(uk, duk);
        for ((o, a), b) in dz.row_mut(k).iter_mut().zip(duk).zip(uk) {
            *o = (a - radial * b) / norms[k];
        }
    }
    Ok((loss, dz))
}

pub fn nt_xent(z: &Mat, pairing: &[usize], tau: f64) -> Result<f64, TrainError> {
    nt_xent_with_grad(z, pairing, tau).map(|(l, _)| l)
}

/// NT-Xent over the encoder embeddings of both views of every pair, with
/// exact gradients for every parameter tensor.
///
/// Per-image gradients are summed in input order so the result does not
/// depend on the number of worker threads.
pub fn loss_and_gradients(
    views: &[(ImageTensor, ImageTensor)],
    params: &ParameterSet,
    cfg: &EncoderConfig,
    tau: f64,
) -> Result<(f64, ParameterSet), TrainError> {
    let n = views.len();
    if n < 2 {
        return Err(TrainError::TooFewPairs(n));
    }
    let imgs: Vec<&ImageTensor> = views.iter().map(|(a, _)| a).chain(views.iter().map(|(_, b)| b)).collect();
    let graphs = imgs.par_iter().map(|img| forward_graph(img, params, cfg)).collect::<Result<Vec<_>, _>>()?;
    let mut z = Mat::zeros(2 * n, cfg.embed_dim);
    for (k, g) in graphs.iter().enumerate() {
        z.row_mut(k).copy_from_slice(g.embedding().as_slice());
    }
    let (loss, dz) = nt_xent_with_grad(&z, &halves_pairing(n), tau)?;

    let mut total = params.zeros_like();
    let chunk = rayon::current_num_threads().max(1);
    for (c, block) in graphs.chunks(chunk).enumerate() {
        let partial: Vec<ParameterSet> = block
            .par_iter()
            .enumerate()
            .map(|(i, g)| {
                let mut acc = params.zeros_like();
                g.tape.backward(g.output, g.cls_seed(dz.row(c * chunk + i)), &mut acc);
                acc
            })
            .collect();
        for p in &partial {
            total.add_assign(p);
        }
    }
    Ok((loss, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.names() != grads.names() || params.names() != state.m.names() {
        return Err(TrainError::ShapeMismatch);
    }
    for i in 0..params.len() {
        if params.tensor(i).shape() != grads.tensor(i).shape() || params.tensor(i).shape() != state.m.tensor(i).shape()
        {
            return Err(TrainError::ShapeMismatch);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..params.len() {
        let g = grads.tensor(i).data();
        let m = state.m.tensor_mut(i).data_mut();
        for (mm, gg) in m.iter_mut().zip(g) {
            *mm = b1 * *mm + (1.0 - b1) * gg;
        }
        let v = state.v.tensor_mut(i).data_mut();
        for (vv, gg) in v.iter_mut().zip(g) {
            *vv = b2 * *vv + (1.0 - b2) * gg * gg;
        }
        let m = state.m.tensor(i).data();
        let v = state.v.tensor(i).data();
        for ((p, mm), vv) in params.tensor_mut(i).data_mut().iter_mut().zip(m).zip(v) {
            let mhat = mm / c1;
            let vhat = vv / c2;
            *p -= lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub temperature: f64,
    /// Epochs without improvement before early stopping.
    pub patience: usize,
    /// Epochs without improvement before the learning rate halves.
    pub lr_halving_patience: usize,
    pub val_fraction: f64,
    /// Minimum absolute validation-loss drop that counts as improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 48,
            temperature: 0.5,
            patience: 5,
            lr_halving_patience: 5,
            val_fraction: 0.1,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::Config("batch_size must be >= 2".into()));
        }
        if self.temperature <= 0.0 || self.lr <= 0.0 {
            return Err(TrainError::Config("temperature and lr must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.patience == 0 || self.lr_halving_patience == 0 {
            return Err(TrainError::Config("patience values must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SchedulerDecision {
    pub improved: bool,
    pub halved: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning-rate halving plus early stopping.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    since_improvement: usize,
    since_halving: usize,
    halvings: u32,
    lr_patience: usize,
    stop_patience: usize,
    min_delta: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, lr_patience: usize, stop_patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            best: f64::INFINITY,
            since_improvement: 0,
            since_halving: 0,
            halvings: 0,
            lr_patience,
            stop_patience,
            min_delta,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn halvings(&self) -> u32 {
        self.halvings
    }

    pub fn observe(&mut self, val_loss: f64) -> SchedulerDecision {
        let improved = val_loss < self.best - self.min_delta;
        let mut halved = false;
        if improved {
            self.best = val_loss;
            self.since_improvement = 0;
            self.since_halving = 0;
        } else {
            self.since_improvement += 1;
            self.since_halving += 1;
            if self.since_halving >= self.lr_patience {
                self.lr *= 0.5;
                self.halvings += 1;
                self.since_halving = 0;
                halved = true;
            }
        }
        SchedulerDecision { improved, halved, stop: self.since_improvement >= self.stop_patience }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect after this epoch's scheduler step.
    pub lr: f64,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!("epoch={} train_loss={} val_loss={} lr={}", self.epoch, self.train_loss, self.val_loss, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EpochCap,
    EarlyStop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stop_reason: StopReason,
}

impl TrainReport {
    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        io::write_atomic(path, &bytes)
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style combination for per-batch stream seeds
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn make_views(imgs: &[&ImageTensor], cfg: &AugmentationConfig, seed: u64) -> Vec<(ImageTensor, ImageTensor)> {
    imgs.iter()
        .enumerate()
        .map(|(i, img)| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, i as u64, 0xA5));
            augment_two_views(img, cfg, &mut rng)
        })
        .collect()
}

fn batch_loss_only(
    views: &[(ImageTensor, ImageTensor)],
    params: &ParameterSet,
    cfg: &EncoderConfig,
    tau: f64,
) -> Result<f64, TrainError> {
    let imgs: Vec<&ImageTensor> = views.iter().map(|(a, _)| a).chain(views.iter().map(|(_, b)| b)).collect();
    let embs = imgs.par_iter().map(|img| crate::encoder::forward(img, params, cfg)).collect::<Result<Vec<_>, _>>()?;
    let mut z = Mat::zeros(imgs.len(), cfg.embed_dim);
    for (k, e) in embs.iter().enumerate() {
        z.row_mut(k).copy_from_slice(e.as_slice());
    }
    nt_xent(&z, &halves_pairing(views.len()), tau)
}

/// Trains from already-preprocessed tensors. `on_epoch` sees each record as
/// it is produced.
pub fn train_tensors(
    images: &[ImageTensor],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(EncoderCheckpoint, TrainReport), TrainError> {
    enc_cfg.validate()?;
    cfg.validate()?;
    aug.validate()?;
    if images.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let val_n =
        if cfg.val_fraction > 0.0 { ((images.len() as f64 * cfg.val_fraction).round() as usize).max(2) } else { 0 };
    if images.len() < val_n + cfg.batch_size {
        return Err(TrainError::Config(format!(
            "{} images cannot hold a validation split of {val_n} plus one batch of {}",
            images.len(),
            cfg.batch_size
        )));
    }
    let (train_idx, val_idx) = order.split_at(images.len() - val_n);
    let val_imgs: Vec<&ImageTensor> = val_idx.iter().map(|&i| &images[i]).collect();
    let val_views = make_views(&val_imgs, aug, mix(cfg.seed ^ aug.seed, u64::MAX, 1));

    let val_loss_of = |params: &ParameterSet| -> Result<f64, TrainError> {
        if val_views.len() < 2 {
            return Ok(f64::NAN);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in val_views.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            total += batch_loss_only(chunk, params, enc_cfg, cfg.temperature)?;
            batches += 1;
        }
        Ok(total / batches as f64)
    };

    let mut params = ParameterSet::init(enc_cfg);
    let mut adam = AdamState::new(&params);
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.lr_halving_patience, cfg.patience, cfg.min_delta);
    let mut best = (params.clone(), f64::INFINITY, 0usize);
    let mut records = Vec::new();
    let mut stop_reason = StopReason::EpochCap;

    for epoch in 1..=cfg.epochs {
        let mut epoch_order = train_idx.to_vec();
        epoch_order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 7)));
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in epoch_order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                continue;
            }
            let imgs: Vec<&ImageTensor> = chunk.iter().map(|&i| &images[i]).collect();
            let views = make_views(&imgs, aug, mix(cfg.seed ^ aug.seed, epoch as u64, b as u64 + 1));
            let (loss, grads) = loss_and_gradients(&views, &params, enc_cfg, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(TrainError::Divergent { what: "loss", epoch });
            }
            if !grads.is_finite() {
                return Err(TrainError::Divergent { what: "gradient", epoch });
            }
            adam_step(&mut params, &grads, &mut adam, sched.lr())?;
            loss_sum += loss;
            batches += 1;
        }
        let train_loss = loss_sum / batches.max(1) as f64;
        let val_loss = if val_views.len() >= 2 { val_loss_of(&params)? } else { train_loss };
        if !val_loss.is_finite() {
            return Err(TrainError::Divergent { what: "validation loss", epoch });
        }
        if val_loss < best.1 {
            best = (params.clone(), val_loss, epoch);
        }
        let decision = sched.observe(val_loss);
        let rec = EpochRecord { epoch, train_loss, val_loss, lr: sched.lr() };
        on_epoch(&rec);
        records.push(rec);
        if decision.stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_params, best_val_loss, best_epoch) = best;
    let report = TrainReport { epochs: records, best_epoch, best_val_loss, stop_reason };
    Ok((EncoderCheckpoint { config: enc_cfg.clone(), params: best_params }, report))
}

/// Loads and preprocesses the images of `manifest` for the encoder.
pub fn load_encoder_inputs(manifest: &DatasetManifest, pre: &PreprocessConfig) -> Result<Vec<ImageTensor>, TrainError> {
    manifest
        .records
        .par_iter()
        .map(|r| {
            let raster = RasterImage::open(Path::new(&r.path))?;
            Ok(io::preprocess_encoder(&raster, pre)?)
        })
        .collect()
}

/// Trains on the manifest's train split.
pub fn train(
    manifest: &DatasetManifest,
    pre: &PreprocessConfig,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
    aug: &AugmentationConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(EncoderCheckpoint, TrainReport), TrainError> {
    let train_split = manifest.split(Split::Train);
    if train_split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    pre.validate(Some(enc_cfg.patch_size))?;
    let images = load_encoder_inputs(&train_split, pre)?;
    train_tensors(&images, enc_cfg, cfg, aug, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> ImageTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::new(16, 16, 1, (0..256).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn identity_augmentation_returns_input() {
        let x = img(1);
        let (a, b) = augment_two_views(&x, &AugmentationConfig::identity(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn augmentation_is_seeded() {
        let x = img(2);
        let cfg = AugmentationConfig::default();
        let a = augment_two_views(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = augment_two_views(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.0.data.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn default_augmentation_changes_the_image() {
        let cfg = AugmentationConfig::default();
        let mut changed = 0;
        for t in 0..100 {
            let x = img(100 + t);
            let (a, b) = augment_two_views(&x, &cfg, &mut ChaCha8Rng::seed_from_u64(t));
            if a != x && b != x {
                changed += 1;
            }
        }
        assert!(changed >= 99, "{changed}/100");
    }

    #[test]
    fn uniform_similarity_gives_ln2() {
        let z = Mat::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let l = nt_xent(&z, &halves_pairing(2), 0.5).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_rejects_bad_inputs() {
        let z = Mat::from_rows(&[vec![1.0], vec![1.0]]);
        assert!(matches!(nt_xent(&z, &halves_pairing(1), 0.5), Err(TrainError::TooFewPairs(1))));
        let z = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0], vec![1.0, 1.0], vec![0.5, 1.0]]);
        assert!(matches!(nt_xent(&z, &halves_pairing(2), 0.5), Err(TrainError::ZeroNorm(1))));
        let z = Mat::from_rows(&[vec![1.0, 0.0], vec![0.3, 1.0], vec![1.0, 1.0], vec![0.5, 1.0]]);
        assert!(matches!(nt_xent(&z, &[1, 0, 3, 3], 0.5), Err(TrainError::BadPairing(_))));
    }

    #[test]
    fn adam_zero_grads_leave_params() {
        let mut p = ParameterSet::from_named(vec![("w".into(), Mat::from_vec(1, 2, vec![0.5, -1.0]))]);
        let before = p.clone();
        let g = p.zeros_like();
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.m, g);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParameterSet::from_named(vec![("w".into(), Mat::from_vec(1, 1, vec![0.0]))]);
        let g = ParameterSet::from_named(vec![("w".into(), Mat::from_vec(1, 1, vec![1.0]))]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        assert!((p.tensor(0).get(0, 0) + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn adam_shape_mismatch() {
        let mut p = ParameterSet::from_named(vec![("w".into(), Mat::zeros(1, 2))]);
        let g = ParameterSet::from_named(vec![("w".into(), Mat::zeros(2, 1))]);
        let mut st = AdamState::new(&p);
        assert!(matches!(adam_step(&mut p, &g, &mut st, 1.0), Err(TrainError::ShapeMismatch)));
    }

    #[test]
    fn scheduler_halves_then_stops() {
        let mut s = PlateauScheduler::new(1.0, 3, 6, 1e-4);
        let mut halved_at = Vec::new();
        let mut stopped_at = None;
        for epoch in 1..=20 {
            let d = s.observe(1.0);
            if d.halved {
                halved_at.push(epoch);
            }
            if d.stop {
                stopped_at = Some(epoch);
                break;
            }
        }
        // epoch 1 sets the baseline; epochs 2..=4 stagnate
        assert_eq!(halved_at, vec![4, 7]);
        assert_eq!(stopped_at, Some(7));
        assert_eq!(s.lr(), 0.25);
    }

    #[test]
    fn scheduler_ignores_sub_threshold_drops() {
        let mut s = PlateauScheduler::new(1.0, 2, 10, 1e-4);
        assert!(s.observe(1.0).improved);
        assert!(!s.observe(1.0 - 5e-5).improved);
        assert!(s.observe(0.5).improved);
    }
}
