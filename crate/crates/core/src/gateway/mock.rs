//! Deterministic offline backends. None of them touch the network.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{sha256_hex, BackendError, ChatBackend, ChatRequest, ImageBackend, ImageGenRequest};
use crate::encoder::{forward, EncoderCheckpoint};
use crate::index::{cosine, EmbeddingStore};
use crate::io::{preprocess_encoder, render_texture, PreprocessConfig, RasterImage, TEXTURE_FAMILIES};
use crate::prompts::{cot_prompts, FewShotPrompt};

pub const MOCK_VQA: &str = "mock-vqa";
pub const MOCK_CLASSIFIER: &str = "mock-classifier";
pub const MOCK_IMAGEGEN: &str = "mock-imagegen";

const SHAPES: [&str; 8] =
    ["hexagonal", "spherical", "rod-like", "fibrous", "lamellar", "irregular", "tubular", "granular"];
const SCALES: [&str; 4] = ["100 nm", "200 nm", "1 μm", "2 μm"];
const SPREAD: [&str; 4] = ["evenly spaced", "clustered", "randomly distributed", "arranged in a regular grid"];
const SURFACE: [&str; 4] = ["smooth", "rough", "porous", "finely textured"];
const TECHNIQUE: [&str; 2] = ["Scanning Electron Microscopy (SEM)", "Transmission Electron Microscopy (TEM)"];

fn hint_from_preamble(text: &str) -> Option<&str> {
    text.split_once("belonging to the ")?.1.strip_suffix(" nanomaterial category.")
}

/// Answers chain-of-thought questions by filling a per-question template
/// with choices drawn from the image digest.
#[derive(Debug, Default, Clone)]
pub struct MockVqa;

impl MockVqa {
    pub fn answer(prompt_id: u8, image_digest: &[u8; 32], hint: Option<&str>) -> String {
        let pick = |i: usize, n: usize| image_digest[i] as usize % n;
        let material = hint.map_or("nanomaterial".to_string(), |h| format!("{h} nanomaterial"));
        let shape = SHAPES[pick(0, SHAPES.len())];
        let scale = SCALES[pick(1, SCALES.len())];
        let spread = SPREAD[pick(2, SPREAD.len())];
        let surface = SURFACE[pick(3, SURFACE.len())];
        let body = match prompt_id {
            1 => format!("The image depicts a {material}. The scale bar indicates that one unit represents {scale}."),
            2 => format!("The nanostructures are mostly {shape}. A single layer is visible and the features look fairly uniform."),
            3 => format!("Individual structures are on the order of {scale} and appear {spread}. No strong aggregation is visible."),
            4 => format!("The surface appears {surface}. No obvious defects or impurities are visible."),
            5 => "The image is grayscale, so compositional variation can only be judged from contrast. No element labels are shown.".to_string(),
            6 => format!("The {shape} structures are mostly separate, with clear boundaries against the background."),
            7 => "There is no direct evidence of interaction with a surrounding matrix.".to_string(),
            8 => format!("The image appears to be taken with {}. No post-processing is indicated.", TECHNIQUE[pick(4, 2)]),
            9 => "No functional features can be identified. The image is a static view.".to_string(),
            10 => format!("The intended application of this {material} is not stated. It appears to be a real, experimental sample."),
            _ => format!("The image shows {spread} {shape} features with a {surface} surface."),
        };
        format!("{body} (ref {})", hex::encode(&image_digest[..8]))
    }
}

impl ChatBackend for MockVqa {
    fn id(&self) -> &str {
        MOCK_VQA
    }

    fn chat(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, BackendError> {
        let image = req.image_parts().next().ok_or_else(|| BackendError::Permanent("no image in request".into()))?;
        let digest: [u8; 32] = Sha256::digest(image).into();
        let texts: Vec<&str> = req.text_parts().collect();
        let hint = texts.first().and_then(|t| hint_from_preamble(t));
        let prompt_id = texts.last().and_then(|t| cot_prompts().id_of(t)).unwrap_or(0);
        Ok(Self::answer(prompt_id, &digest, hint))
    }
}

/// Similarity-weighted voting over the demonstrations of a few-shot request.
pub struct MockClassifier {
    checkpoint: EncoderCheckpoint,
    preprocess: PreprocessConfig,
    known: Mutex<HashMap<String, Vec<f64>>>,
}

impl MockClassifier {
    pub fn new(checkpoint: EncoderCheckpoint, preprocess: PreprocessConfig) -> Self {
        Self { checkpoint, preprocess, known: Mutex::new(HashMap::new()) }
    }

    /// Seeds the embedding memo from a store so that demonstration images
    /// resolve to exactly the stored rows. `digests` pairs store ids with
    /// the SHA-256 of their image file bytes.
    pub fn with_store<'a>(self, store: &EmbeddingStore, digests: impl IntoIterator<Item = (&'a str, String)>) -> Self {
        {
            let mut known = self.known.lock().unwrap();
            for (id, digest) in digests {
                if let Some(row) = store.get(id) {
                    known.insert(digest, row.to_vec());
                }
            }
        }
        self
    }

    pub fn embed(&self, bytes: &[u8]) -> Result<Vec<f64>, BackendError> {
        let key = sha256_hex(bytes);
        if let Some(v) = self.known.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let img = RasterImage::decode(bytes).map_err(BackendError::Permanent)?;
        let t = preprocess_encoder(&img, &self.preprocess).map_err(|e| BackendError::Permanent(e.to_string()))?;
        let e = forward(&t, &self.checkpoint.params, &self.checkpoint.config)
            .map_err(|e| BackendError::Permanent(e.to_string()))?;
        self.known.lock().unwrap().insert(key, e.0.clone());
        Ok(e.0)
    }

    /// Labels ranked by summed cosine similarity between the query and each
    /// label's demonstrations; labels without demonstrations follow in label-set order.
    pub fn rank(&self, prompt: &FewShotPrompt) -> Result<Vec<String>, BackendError> {
        let q = self.embed(&prompt.query)?;
        let mut score: Vec<Option<f64>> = vec![None; prompt.label_set.len()];
        for d in &prompt.demonstrations {
            let li = prompt.label_set.iter().position(|l| *l == d.label).expect("validated label");
            let s = cosine(&q, &self.embed(&d.image)?).map_err(|e| BackendError::Permanent(e.to_string()))?;
            *score[li].get_or_insert(0.0) += s;
        }
        let mut order: Vec<usize> = (0..prompt.label_set.len()).collect();
        order.sort_by(|&a, &b| match (score[a], score[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.cmp(&b),
        });
        Ok(order.into_iter().map(|i| prompt.label_set[i].clone()).collect())
    }
}

impl ChatBackend for MockClassifier {
    fn id(&self) -> &str {
        MOCK_CLASSIFIER
    }

    fn chat(&self, req: &ChatRequest, _timeout: Duration) -> Result<String, BackendError> {
        let prompt = FewShotPrompt::from_request(req).map_err(|e| BackendError::Permanent(e.to_string()))?;
        let ranked = self.rank(&prompt)?;
        Ok(ranked.iter().take(5).enumerate().map(|(i, l)| format!("{}. {l}", i + 1)).collect::<Vec<_>>().join("\n"))
    }
}

/// Procedural textures whose family is chosen by hashing the prompt.
#[derive(Debug, Default, Clone)]
pub struct MockImageGen;

impl MockImageGen {
    pub fn family_for(prompt: &str) -> usize {
        Sha256::digest(prompt.as_bytes())[0] as usize % TEXTURE_FAMILIES.len()
    }

    pub fn render(req: &ImageGenRequest, index: usize) -> Result<Vec<u8>, BackendError> {
        let prompt_hash: [u8; 32] = Sha256::digest(req.prompt.as_bytes()).into();
        let mut h = Sha256::new();
        h.update(prompt_hash);
        h.update((index as u64).to_le_bytes());
        h.update(req.seed.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(seed);
        let side = req.width.max(req.height);
        let family = Self::family_for(&req.prompt);
        let variant = (prompt_hash[1] % 3) as usize;
        let sq = render_texture(family, variant, side, &mut rng);
        let mut px = Vec::with_capacity(req.width * req.height);
        for y in 0..req.height {
            px.extend_from_slice(&sq.pixels()[y * side..y * side + req.width]);
        }
        let img = RasterImage::new(req.height, req.width, 1, px).map_err(|e| BackendError::Permanent(e.to_string()))?;
        img.to_png().map_err(|e| BackendError::Permanent(e.to_string()))
    }
}

impl ImageBackend for MockImageGen {
    fn id(&self) -> &str {
        MOCK_IMAGEGEN
    }

    fn generate(&self, req: &ImageGenRequest, _timeout: Duration) -> Result<Vec<Vec<u8>>, BackendError> {
        (0..req.n).map(|i| Self::render(req, i)).collect()
    }
}
