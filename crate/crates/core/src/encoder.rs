//! Patch-token micrograph encoder with two-stage (local, then cls-centric
//! global) attention per layer. The output is the final `cls` row, `h_cls`.
//!
//! Layer structure (pre-norm), repeated for the local and the global stage:
//!
//! ```text
//! x = x + Attn(LN(x), mask)
//! x = x + FF(LN(x))          FF = fc2(gelu(fc1(.)))
//! ```
//!
//! The local mask lets patch `i` attend to patch `j` when their Chebyshev
//! distance on the patch grid is at most `local_window`; the `cls` row gets no
//! keys, so local attention leaves it to the residual path. The global mask
//! lets `cls` attend to every token and each patch attend to `cls` and itself.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AttentionMask, NodeId, Tape};
use crate::blob::{self, BlobError};
use crate::io::ImageTensor;
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: &str = "NMID-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("image {got_h}x{got_w}x{got_c} does not match encoder input {want_h}x{want_w}x{want_c}")]
    InputShape { got_h: usize, got_w: usize, got_c: usize, want_h: usize, want_w: usize, want_c: usize },
    #[error("image dims {height}x{width} not divisible by patch size {patch}")]
    NotDivisible { height: usize, width: usize, patch: usize },
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("parameter set is missing {0}")]
    MissingParameter(String),
    #[error("non-finite activation in layer {layer} ({stage})")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error(transparent)]
    Blob(#[from] BlobError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub local_window: usize,
    /// Feed-forward hidden width; `0` means `4 · embed_dim`.
    pub ff_hidden: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch_size: 32,
            embed_dim: 128,
            layers: 2,
            heads: 4,
            head_dim: 32,
            local_window: 2,
            ff_hidden: 0,
            image_height: 224,
            image_width: 224,
            channels: 3,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let err = |m: String| Err(EncoderError::Config(m));
        if self.patch_size == 0 || self.embed_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return err("patch_size, embed_dim, heads and head_dim must be positive".into());
        }
        if self.image_height % self.patch_size != 0 || self.image_width % self.patch_size != 0 {
            return err(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_height, self.image_width, self.patch_size
            ));
        }
        if self.image_height == 0 || self.image_width == 0 {
            return err("image dims must be positive".into());
        }
        if self.heads * self.head_dim != self.embed_dim {
            return err(format!(
                "heads ({}) x head_dim ({}) must equal embed_dim ({})",
                self.heads, self.head_dim, self.embed_dim
            ));
        }
        if self.local_window == 0 {
            return err("local_window must be >= 1".into());
        }
        if self.channels != 1 && self.channels != 3 {
            return err(format!("channels must be 1 or 3, got {}", self.channels));
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch_size, self.image_width / self.patch_size)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn ff_width(&self) -> usize {
        if self.ff_hidden == 0 {
            4 * self.embed_dim
        } else {
            self.ff_hidden
        }
    }

    /// Names and shapes of every trainable tensor, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, (usize, usize))> {
        let d = self.embed_dim;
        let hd = self.heads * self.head_dim;
        let ff = self.ff_width();
        let mut v = vec![
            ("patch_embed.weight".to_string(), (self.patch_dim(), d)),
            ("patch_embed.bias".to_string(), (1, d)),
            ("pos_embed".to_string(), (self.num_patches() + 1, d)),
            ("cls_token".to_string(), (1, d)),
        ];
        for l in 0..self.layers {
            for stage in ["local", "global"] {
                let p = format!("layers.{l}.{stage}");
                v.extend([
                    (format!("{p}.norm1.gamma"), (1, d)),
                    (format!("{p}.norm1.beta"), (1, d)),
                    (format!("{p}.attn.q.weight"), (d, hd)),
                    (format!("{p}.attn.q.bias"), (1, hd)),
                    (format!("{p}.attn.k.weight"), (d, hd)),
                    (format!("{p}.attn.k.bias"), (1, hd)),
                    (format!("{p}.attn.v.weight"), (d, hd)),
                    (format!("{p}.attn.v.bias"), (1, hd)),
                    (format!("{p}.attn.out.weight"), (hd, d)),
                    (format!("{p}.attn.out.bias"), (1, d)),
                    (format!("{p}.norm2.gamma"), (1, d)),
                    (format!("{p}.norm2.beta"), (1, d)),
                    (format!("{p}.ff.fc1.weight"), (d, ff)),
                    (format!("{p}.ff.fc1.bias"), (1, ff)),
                    (format!("{p}.ff.fc2.weight"), (ff, d)),
                    (format!("{p}.ff.fc2.bias"), (1, d)),
                ]);
            }
        }
        v.push(("final_norm.gamma".to_string(), (1, d)));
        v.push(("final_norm.beta".to_string(), (1, d)));
        v
    }

    /// Patch-only local mask over the `n + 1` token sequence (token 0 is `cls`).
    pub fn local_mask(&self) -> AttentionMask {
        let (_, cols) = self.grid();
        let n = self.num_patches();
        let w = self.local_window;
        AttentionMask::from_fn(n + 1, |i, j| {
            if i == 0 || j == 0 {
                return false;
            }
            let (ri, ci) = ((i - 1) / cols, (i - 1) % cols);
            let (rj, cj) = ((j - 1) / cols, (j - 1) % cols);
            ri.abs_diff(rj).max(ci.abs_diff(cj)) <= w
        })
    }

    pub fn global_mask(&self) -> AttentionMask {
        AttentionMask::from_fn(self.num_patches() + 1, |i, j| i == 0 || j == 0 || i == j)
    }
}

/// Named trainable tensors. Also used, with identical layout, for gradients
/// and optimiser moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    names: Vec<String>,
    tensors: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParameterSet {
    pub fn from_named(named: Vec<(String, Mat)>) -> Self {
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut index = HashMap::with_capacity(named.len());
        for (i, (n, t)) in named.into_iter().enumerate() {
            let prev = index.insert(n.clone(), i);
            assert!(prev.is_none(), "duplicate parameter name {n}");
            names.push(n);
            tensors.push(t);
        }
        Self { names, tensors, index }
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self::from_named(cfg.parameter_shapes().into_iter().map(|(n, (r, c))| (n, Mat::zeros(r, c))).collect())
    }

    /// Zero tensors with the same names and shapes as `self`.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect(),
            index: self.index.clone(),
        }
    }

    /// Seeded initialisation: Xavier-uniform weights, zero biases, unit
    /// norm scales, N(0, 0.02) positional embeddings and cls token.
    pub fn init(cfg: &EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let small = Normal::new(0.0, 0.02).expect("valid sigma");
        let named = cfg
            .parameter_shapes()
            .into_iter()
            .map(|(name, (r, c))| {
                let t = if name.ends_with(".weight") {
                    let limit = (6.0 / (r + c) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-limit, limit).expect("valid range");
                    Mat::from_vec(r, c, (0..r * c).map(|_| dist.sample(&mut rng)).collect())
                } else if name == "pos_embed" || name == "cls_token" {
                    Mat::from_vec(r, c, (0..r * c).map(|_| small.sample(&mut rng)).collect())
                } else if name.ends_with(".gamma") {
                    Mat::from_vec(r, c, vec![1.0; r * c])
                } else {
                    Mat::zeros(r, c)
                };
                (name, t)
            })
            .collect();
        Self::from_named(named)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    #[inline]
    pub fn tensor(&self, i: usize) -> &Mat {
        &self.tensors[i]
    }

    #[inline]
    pub fn tensor_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Mat::is_finite)
    }

    /// Adds `other` tensor-by-tensor; layouts must match.
    pub fn add_assign(&mut self, other: &ParameterSet) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.scale(s);
        }
    }

    /// Confirms names and shapes agree with `cfg`.
    pub fn check_shapes(&self, cfg: &EncoderConfig) -> Result<(), EncoderError> {
        for (name, shape) in cfg.parameter_shapes() {
            let t = self.get(&name).ok_or_else(|| EncoderError::MissingParameter(name.clone()))?;
            if t.shape() != shape {
                return Err(EncoderError::ShapeMismatch { name, expected: shape, found: t.shape() });
            }
        }
        Ok(())
    }
}

/// Non-overlapping patches in raster order, each flattened row-major
/// (patch row, patch column, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    pub tokens: Mat,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

pub fn tokenize(img: &ImageTensor, patch: usize) -> Result<PatchSequence, EncoderError> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(EncoderError::NotDivisible { height: img.height, width: img.width, patch });
    }
    let (rows, cols) = (img.height / patch, img.width / patch);
    let c = img.channels;
    let pd = patch * patch * c;
    let mut tokens = Mat::zeros(rows * cols, pd);
    for gr in 0..rows {
        for gc in 0..cols {
            let t = tokens.row_mut(gr * cols + gc);
            for py in 0..patch {
                let src_start = ((gr * patch + py) * img.width + gc * patch) * c;
                let dst_start = py * patch * c;
                t[dst_start..dst_start + patch * c].copy_from_slice(&img.data[src_start..src_start + patch * c]);
            }
        }
    }
    Ok(PatchSequence { tokens, grid: (rows, cols) })
}

fn check_input(img: &ImageTensor, cfg: &EncoderConfig) -> Result<(), EncoderError> {
    if img.height != cfg.image_height || img.width != cfg.image_width || img.channels != cfg.channels {
        return Err(EncoderError::InputShape {
            got_h: img.height,
            got_w: img.width,
            got_c: img.channels,
            want_h: cfg.image_height,
            want_w: cfg.image_width,
            want_c: cfg.channels,
        });
    }
    Ok(())
}

/// Built forward graph for one image. `output` is the final normalised
/// sequence; row 0 is `h_cls`.
pub struct ForwardGraph<'p> {
    pub tape: Tape<'p>,
    pub output: NodeId,
    /// Attention nodes per layer: `(local, global)`.
    pub attention: Vec<(NodeId, NodeId)>,
}

impl ForwardGraph<'_> {
    pub fn embedding(&self) -> Embedding {
        Embedding(self.tape.value(self.output).row(0).to_vec())
    }

    /// Gradient seed that places `grad` on the `cls` row of the output.
    pub fn cls_seed(&self, grad: &[f64]) -> Mat {
        let out = self.tape.value(self.output);
        let mut seed = Mat::zeros(out.rows(), out.cols());
        seed.row_mut(0).copy_from_slice(grad);
        seed
    }
}

struct Idx<'a>(&'a ParameterSet);

impl Idx<'_> {
    fn get(&self, name: &str) -> Result<usize, EncoderError> {
        self.0.index_of(name).ok_or_else(|| EncoderError::MissingParameter(name.to_string()))
    }
}

fn block<'p>(
    tape: &mut Tape<'p>,
    idx: &Idx<'_>,
    x: NodeId,
    prefix: &str,
    heads: usize,
    mask: &AttentionMask,
) -> Result<(NodeId, NodeId), EncoderError> {
    let p = |s: &str| idx.get(&format!("{prefix}.{s}"));
    let (g1, b1) = (tape.param(p("norm1.gamma")?), tape.param(p("norm1.beta")?));
    let h = tape.layer_norm(x, g1, b1);
    let proj = |tape: &mut Tape<'p>, which: &str| -> Result<NodeId, EncoderError> {
        let w = tape.param(p(&format!("attn.{which}.weight"))?);
        let b = tape.param(p(&format!("attn.{which}.bias"))?);
        Ok(tape.linear(h, w, b))
    };
    let q = proj(tape, "q")?;
    let k = proj(tape, "k")?;
    let v = proj(tape, "v")?;
    let att = tape.attention(q, k, v, heads, mask);
    let (wo, bo) = (tape.param(p("attn.out.weight")?), tape.param(p("attn.out.bias")?));
    let o = tape.linear(att, wo, bo);
    let x = tape.add(x, o);
    let (g2, b2) = (tape.param(p("norm2.gamma")?), tape.param(p("norm2.beta")?));
    let h2 = tape.layer_norm(x, g2, b2);
    let (w1, bb1) = (tape.param(p("ff.fc1.weight")?), tape.param(p("ff.fc1.bias")?));
    let f = tape.linear(h2, w1, bb1);
    let f = tape.gelu(f);
    let (w2, bb2) = (tape.param(p("ff.fc2.weight")?), tape.param(p("ff.fc2.bias")?));
    let f = tape.linear(f, w2, bb2);
    Ok((tape.add(x, f), att))
}

/// Records the full forward pass for `img` onto a fresh tape.
pub fn forward_graph<'p>(
    img: &ImageTensor,
    params: &'p ParameterSet,
    cfg: &EncoderConfig,
) -> Result<ForwardGraph<'p>, EncoderError> {
    cfg.validate()?;
    check_input(img, cfg)?;
    let seq = tokenize(img, cfg.patch_size)?;
    let idx = Idx(params);
    let mut tape = Tape::new(params);

    let tokens = tape.constant(seq.tokens);
    let (pw, pb) = (tape.param(idx.get("patch_embed.weight")?), tape.param(idx.get("patch_embed.bias")?));
    let patches = tape.linear(tokens, pw, pb);
    let cls = tape.param(idx.get("cls_token")?);
    let seq = tape.concat_rows(cls, patches);
    let pos = tape.param(idx.get("pos_embed")?);
    let mut x = tape.add(seq, pos);

    let local = cfg.local_mask();
    let global = cfg.global_mask();
    let mut attention = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let (x1, a_local) = block(&mut tape, &idx, x, &format!("layers.{l}.local"), cfg.heads, &local)?;
        if !tape.value(x1).is_finite() {
            return Err(EncoderError::NonFinite { layer: l, stage: "local" });
        }
        let (x2, a_global) = block(&mut tape, &idx, x1, &format!("layers.{l}.global"), cfg.heads, &global)?;
        if !tape.value(x2).is_finite() {
            return Err(EncoderError::NonFinite { layer: l, stage: "global" });
        }
        attention.push((a_local, a_global));
        x = x2;
    }
    let (g, b) = (tape.param(idx.get("final_norm.gamma")?), tape.param(idx.get("final_norm.beta")?));
    let output = tape.layer_norm(x, g, b);
    Ok(ForwardGraph { tape, output, attention })
}

pub fn forward(img: &ImageTensor, params: &ParameterSet, cfg: &EncoderConfig) -> Result<Embedding, EncoderError> {
    Ok(forward_graph(img, params, cfg)?.embedding())
}

/// Embeds each image independently; output order follows input order.
pub fn forward_batch(
    imgs: &[ImageTensor],
    params: &ParameterSet,
    cfg: &EncoderConfig,
) -> Result<Vec<Embedding>, EncoderError> {
    imgs.par_iter().map(|img| forward(img, params, cfg)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: usize,
    byte_len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    magic: String,
    version: u32,
    config: EncoderConfig,
    tensor_table: Vec<TensorEntry>,
}

/// Trained parameters together with the config that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub params: ParameterSet,
}

impl EncoderCheckpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, EncoderError> {
        let mut payload = Vec::new();
        let mut table = Vec::with_capacity(self.params.len());
        for (name, t) in self.params.iter() {
            let offset = payload.len();
            blob::f64s_to_le(t.data(), &mut payload);
            table.push(TensorEntry {
                name: name.to_string(),
                shape: vec![t.rows(), t.cols()],
                dtype: "f64".into(),
                byte_offset: offset,
                byte_len: payload.len() - offset,
            });
        }
        let header = CheckpointHeader {
            magic: CHECKPOINT_MAGIC.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensor_table: table,
        };
        Ok(blob::encode(&header, &payload)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EncoderError> {
        let (raw, payload) =
            blob::split(bytes).map_err(|_| EncoderError::Version("missing checkpoint header".into()))?;
        let value: serde_json::Value =
            serde_json::from_slice(raw).map_err(|_| EncoderError::Version("header is not NMID-CKPT JSON".into()))?;
        if value.get("magic").and_then(|m| m.as_str()) != Some(CHECKPOINT_MAGIC) {
            return Err(EncoderError::Version("bad magic".into()));
        }
        if value.get("version").and_then(|v| v.as_u64()) != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(EncoderError::Version(format!("unsupported version {}", value["version"])));
        }
        let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| BlobError::Header(e.to_string()))?;
        header.config.validate()?;
        let expected = header.config.parameter_shapes();
        if expected.len() != header.tensor_table.len() {
            return Err(EncoderError::ShapeMismatch {
                name: format!("<{} tensors>", header.tensor_table.len()),
                expected: (expected.len(), 0),
                found: (header.tensor_table.len(), 0),
            });
        }
        let mut named = Vec::with_capacity(expected.len());
        for ((name, shape), entry) in expected.into_iter().zip(&header.tensor_table) {
            let found = match entry.shape.as_slice() {
                [r, c] => (*r, *c),
                other => (other.iter().product(), 1),
            };
            if entry.name != name || found != shape {
                return Err(EncoderError::ShapeMismatch { name: entry.name.clone(), expected: shape, found });
            }
            if entry.dtype != "f64" && entry.dtype != "f32" {
                return Err(EncoderError::Version(format!("unknown dtype {}", entry.dtype)));
            }
            let width = if entry.dtype == "f64" { 8 } else { 4 };
            let count = shape.0 * shape.1;
            if entry.byte_len != count * width {
                return Err(EncoderError::ShapeMismatch { name, expected: shape, found: (entry.byte_len / width, 1) });
            }
            let end = entry.byte_offset + entry.byte_len;
            if end > payload.len() {
                return Err(EncoderError::Truncated(format!(
                    "{name} needs bytes up to {end}, file has {}",
                    payload.len()
                )));
            }
            let bytes = &payload[entry.byte_offset..end];
            let data = if width == 8 {
                blob::le_to_f64s(bytes)
            } else {
                blob::le_to_f32s(bytes).into_iter().map(f64::from).collect()
            };
            named.push((name, Mat::from_vec(shape.0, shape.1, data)));
        }
        Ok(Self { config: header.config, params: ParameterSet::from_named(named) })
    }

    pub fn save(&self, path: &Path) -> Result<(), EncoderError> {
        let bytes = self.to_bytes()?;
        crate::io::write_atomic(path, &bytes).map_err(BlobError::from)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EncoderError> {
        Self::from_bytes(&blob::read(path)?)
    }
}

pub fn save_checkpoint(params: &ParameterSet, cfg: &EncoderConfig, path: &Path) -> Result<(), EncoderError> {
    params.check_shapes(cfg)?;
    EncoderCheckpoint { config: cfg.clone(), params: params.clone() }.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, EncoderConfig), EncoderError> {
    let ck = EncoderCheckpoint::load(path)?;
    Ok((ck.params, ck.config))
}
