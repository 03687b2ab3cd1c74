//! Backend-agnostic access to multimodal chat and text-to-image services:
//! retries with jittered exponential backoff, a token-bucket rate limiter,
//! bounded concurrency and a content-addressed response cache.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::io::write_atomic;

pub mod mock;
pub mod remote;

pub const MIME_PNG: &str = "image/png";
pub const MIME_JPEG: &str = "image/jpeg";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    /// Worth retrying: timeouts, 429, 5xx, dropped connections.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Permanent(String),
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend} failed after {attempts} attempt(s): {source}")]
    Backend { backend: String, attempts: u32, source: BackendError },
    #[error("rate limiter has been shut down")]
    RateLimiterClosed,
    #[error("invalid gateway policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

mod b64 {
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&base64::engine::general_purpose::STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        base64::engine::general_purpose::STANDARD.decode(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Part {
    Text {
        text: String,
    },
    Image {
        mime: String,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
}

impl Part {
    pub fn text(s: impl Into<String>) -> Self {
        Part::Text { text: s.into() }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Part::Text { text } => Some(text),
            Part::Image { .. } => None,
        }
    }

    pub fn as_image(&self) -> Option<&[u8]> {
        match self {
            Part::Image { data, .. } => Some(data),
            Part::Text { .. } => None,
        }
    }
}

/// Optional sampling settings passed through to the backend untouched.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

/// An ordered multimodal message. Serialisation is canonical: field order
/// is fixed and parts keep their order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub parts: Vec<Part>,
    #[serde(default)]
    pub params: DecodingParams,
}

impl ChatRequest {
    pub fn new(parts: Vec<Part>) -> Self {
        Self { parts, params: DecodingParams::default() }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.parts.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no parts".into()));
        }
        for p in &self.parts {
            if let Part::Image { mime, data } = p {
                if mime != MIME_PNG && mime != MIME_JPEG {
                    return Err(GatewayError::InvalidRequest(format!("unsupported image mime {mime:?}")));
                }
                if data.is_empty() {
                    return Err(GatewayError::InvalidRequest("empty image part".into()));
                }
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("request serialises")
    }

    pub fn text_parts(&self) -> impl Iterator<Item = &str> {
        self.parts.iter().filter_map(Part::as_text)
    }

    pub fn image_parts(&self) -> impl Iterator<Item = &[u8]> {
        self.parts.iter().filter_map(Part::as_image)
    }
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key: digest of the backend id, a separator, and the canonical payload.
pub fn cache_key(backend: &str, payload: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(backend.as_bytes());
    h.update([0u8]);
    h.update(payload);
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub text_parts: u32,
    pub image_parts: u32,
    pub output_chars: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend: String,
    pub usage: Usage,
    pub cached: bool,
    /// Backend invocations made for this response; 0 when served from cache.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageGenRequest {
    pub prompt: String,
    pub n: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ImageGenRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.prompt.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty image prompt".into()));
        }
        if self.n == 0 || self.width == 0 || self.height == 0 {
            return Err(GatewayError::InvalidRequest("n, width and height must be >= 1".into()));
        }
        Ok(())
    }
}

/// A generated image stored under its content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub digest: String,
    pub path: PathBuf,
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn chat(&self, req: &ChatRequest, timeout: Duration) -> Result<String, BackendError>;
}

pub trait ImageBackend: Send + Sync {
    fn id(&self) -> &str;
    /// PNG bytes for each of the `req.n` images.
    fn generate(&self, req: &ImageGenRequest, timeout: Duration) -> Result<Vec<Vec<u8>>, BackendError>;
}

static NETWORK_FORBIDDEN: AtomicBool = AtomicBool::new(false);
static NETWORK_ATTEMPTS: AtomicU64 = AtomicU64::new(0);

/// While set, every outbound HTTP attempt fails without touching the network.
pub fn forbid_network(forbid: bool) {
    NETWORK_FORBIDDEN.store(forbid, Ordering::SeqCst);
}

/// Number of outbound HTTP attempts made (or refused) by this process.
pub fn network_attempts() -> u64 {
    NETWORK_ATTEMPTS.load(Ordering::SeqCst)
}

pub(crate) fn note_network_attempt() -> Result<(), BackendError> {
    NETWORK_ATTEMPTS.fetch_add(1, Ordering::SeqCst);
    if NETWORK_FORBIDDEN.load(Ordering::SeqCst) {
        return Err(BackendError::Permanent("network access is forbidden in this process".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayPolicy {
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    pub backoff_max_ms: u64,
    /// Sustained calls per second.
    pub rate_per_sec: f64,
    pub burst: u32,
    pub cache_dir: Option<PathBuf>,
    pub timeout_ms: u64,
    pub max_concurrency: usize,
    pub jitter_seed: u64,
}

impl Default for GatewayPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            backoff_base_ms: 250,
            backoff_max_ms: 8_000,
            rate_per_sec: 5.0,
            burst: 5,
            cache_dir: None,
            timeout_ms: 60_000,
            max_concurrency: 4,
            jitter_seed: 0,
        }
    }
}

impl GatewayPolicy {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.rate_per_sec > 0.0 && self.rate_per_sec.is_finite()) {
            return Err(GatewayError::Policy("rate_per_sec must be > 0".into()));
        }
        if self.burst == 0 || self.max_concurrency == 0 {
            return Err(GatewayError::Policy("burst and max_concurrency must be >= 1".into()));
        }
        Ok(())
    }
}

/// Time source for the limiter and backoff; swapped for a manual clock in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock(Instant);

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock(Instant::now())
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.0.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only moves when slept on.
#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
    sleeps: Mutex<Vec<Duration>>,
}

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap().push(d);
        self.advance(d);
    }
}

struct Bucket {
    tokens: f64,
    last: Duration,
    closed: bool,
}

/// Token bucket: `burst` capacity refilled at `rate` tokens per second.
pub struct RateLimiter {
    rate: f64,
    burst: f64,
    state: Mutex<Bucket>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(rate: f64, burst: u32, clock: Arc<dyn Clock>) -> Self {
        let now = clock.now();
        Self {
            rate,
            burst: burst as f64,
            state: Mutex::new(Bucket { tokens: burst as f64, last: now, closed: false }),
            clock,
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) -> Result<(), GatewayError> {
        loop {
            let wait = {
                let mut b = self.state.lock().unwrap();
                if b.closed {
                    return Err(GatewayError::RateLimiterClosed);
                }
                let now = self.clock.now();
                let elapsed = now.saturating_sub(b.last).as_secs_f64();
                b.tokens = (b.tokens + elapsed * self.rate).min(self.burst);
                b.last = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return Ok(());
                }
                // round up so the refill after the sleep reaches a whole token
                Duration::from_nanos((((1.0 - b.tokens) / self.rate) * 1e9).ceil().max(1.0) as u64)
            };
            self.clock.sleep(wait);
        }
    }

    pub fn shutdown(&self) {
        self.state.lock().unwrap().closed = true;
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub retries: u64,
}

/// Shared entry point for all backend traffic.
pub struct Gateway {
    policy: GatewayPolicy,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    permits: Permits,
    jitter: Mutex<ChaCha8Rng>,
    stats: Mutex<GatewayStats>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageCacheEntry {
    backend: String,
    request: ImageGenRequest,
    digests: Vec<String>,
}

impl Gateway {
    pub fn new(policy: GatewayPolicy) -> Result<Self, GatewayError> {
        Self::with_clock(policy, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(policy: GatewayPolicy, clock: Arc<dyn Clock>) -> Result<Self, GatewayError> {
        policy.validate()?;
        let limiter = RateLimiter::new(policy.rate_per_sec, policy.burst, clock.clone());
        Ok(Self {
            permits: Permits { free: Mutex::new(policy.max_concurrency), cv: Condvar::new() },
            jitter: Mutex::new(ChaCha8Rng::seed_from_u64(policy.jitter_seed)),
            stats: Mutex::new(GatewayStats::default()),
            limiter,
            clock,
            policy,
        })
    }

    pub fn policy(&self) -> &GatewayPolicy {
        &self.policy
    }

    pub fn stats(&self) -> GatewayStats {
        self.stats.lock().unwrap().clone()
    }

    pub fn shutdown(&self) {
        self.limiter.shutdown();
    }

    fn timeout(&self) -> Duration {
        Duration::from_millis(self.policy.timeout_ms)
    }

    /// Backoff before retry `attempt` (1-based): half the capped exponential
    /// delay plus a uniform draw over the other half.
    fn backoff(&self, attempt: u32) -> Duration {
        let exp = self.policy.backoff_base_ms.saturating_mul(1u64 << (attempt - 1).min(20));
        let capped = exp.min(self.policy.backoff_max_ms) as f64;
        let r: f64 = self.jitter.lock().unwrap().random();
        Duration::from_secs_f64((capped / 2.0 + r * capped / 2.0) / 1000.0)
    }

    fn with_retries<T>(
        &self,
        backend: &str,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<(T, u32), GatewayError> {
        let _permit = self.permits.acquire();
        let mut attempts = 0;
        loop {
            self.limiter.acquire()?;
            attempts += 1;
            self.stats.lock().unwrap().backend_calls += 1;
            match call() {
                Ok(v) => return Ok((v, attempts)),
                Err(BackendError::Transient(msg)) if attempts <= self.policy.max_retries => {
                    log::warn!("{backend}: attempt {attempts} failed ({msg}); retrying");
                    self.stats.lock().unwrap().retries += 1;
                    self.clock.sleep(self.backoff(attempts));
                }
                Err(e) => return Err(GatewayError::Backend { backend: backend.to_string(), attempts, source: e }),
            }
        }
    }

    fn cache_path(&self, backend: &str, name: &str) -> Option<PathBuf> {
        self.policy.cache_dir.as_ref().map(|d| d.join(backend).join(name))
    }

    fn cache_write(path: &Path, bytes: &[u8]) {
        let res = path.parent().map_or(Ok(()), fs::create_dir_all).and_then(|_| write_atomic(path, bytes));
        if let Err(e) = res {
            log::warn!("cache write to {} failed ({e}); continuing uncached", path.display());
        }
    }

    fn cache_read(path: &Path) -> Option<Vec<u8>> {
        match fs::read(path) {
            Ok(b) => Some(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => {
                log::warn!("cache read of {} failed ({e}); treating as a miss", path.display());
                None
            }
        }
    }

    pub fn send_chat(&self, backend: &dyn ChatBackend, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let id = backend.id();
        let key = cache_key(id, &req.canonical_bytes());
        let path = self.cache_path(id, &format!("{key}.json"));
        if let Some(p) = &path {
            if let Some(bytes) = Self::cache_read(p) {
                if let Ok(mut resp) = serde_json::from_slice::<ChatResponse>(&bytes) {
                    resp.cached = true;
                    resp.attempts = 0;
                    self.stats.lock().unwrap().cache_hits += 1;
                    return Ok(resp);
                }
                log::warn!("ignoring unreadable cache entry {}", p.display());
            }
        }
        let timeout = self.timeout();
        let (text, attempts) = self.with_retries(id, || {
            let t = backend.chat(req, timeout)?;
            if t.trim().is_empty() {
                return Err(BackendError::Transient("empty response text".into()));
            }
            Ok(t)
        })?;
        let usage = Usage {
            text_parts: req.text_parts().count() as u32,
            image_parts: req.image_parts().count() as u32,
            output_chars: text.chars().count() as u32,
        };
        let resp = ChatResponse { text, backend: id.to_string(), usage, cached: false, attempts };
        if let Some(p) = &path {
            Self::cache_write(p, &serde_json::to_vec_pretty(&resp).expect("response serialises"));
        }
        Ok(resp)
    }

    /// Generates `req.n` images and stores each as `<dest>/<digest>.png`.
    /// Returns the refs plus whether they came from the cache.
    pub fn generate_images(
        &self,
        backend: &dyn ImageBackend,
        req: &ImageGenRequest,
        dest: &Path,
    ) -> Result<(Vec<ImageRef>, bool), GatewayError> {
        req.validate()?;
        let id = backend.id();
        let key = cache_key(id, &serde_json::to_vec(req).expect("request serialises"));
        let entry_path = self.cache_path(id, &format!("{key}.json"));
        let png_path = |digest: &str| dest.join(format!("{digest}.png"));
        if let Some(p) = &entry_path {
            if let Some(bytes) = Self::cache_read(p) {
                if let Ok(entry) = serde_json::from_slice::<ImageCacheEntry>(&bytes) {
                    if entry.digests.iter().all(|d| png_path(d).is_file()) {
                        self.stats.lock().unwrap().cache_hits += 1;
                        let refs =
                            entry.digests.iter().map(|d| ImageRef { digest: d.clone(), path: png_path(d) }).collect();
                        return Ok((refs, true));
                    }
                }
            }
        }
        let timeout = self.timeout();
        let (images, _) = self.with_retries(id, || {
            let imgs = backend.generate(req, timeout)?;
            if imgs.len() != req.n {
                return Err(BackendError::Permanent(format!("asked for {} images, got {}", req.n, imgs.len())));
            }
            Ok(imgs)
        })?;
        fs::create_dir_all(dest)?;
        let mut refs = Vec::with_capacity(images.len());
        for bytes in images {
            let digest = sha256_hex(&bytes);
            let path = png_path(&digest);
            if !path.is_file() {
                write_atomic(&path, &bytes)?;
            }
            refs.push(ImageRef { digest, path });
        }
        if let Some(p) = &entry_path {
            let entry = ImageCacheEntry {
                backend: id.to_string(),
                request: req.clone(),
                digests: refs.iter().map(|r| r.digest.clone()).collect(),
            };
            Self::cache_write(p, &serde_json::to_vec_pretty(&entry).expect("entry serialises"));
        }
        Ok((refs, false))
    }
}

/// Reads an image file as a request part, choosing the mime from its bytes.
pub fn image_part(bytes: Vec<u8>) -> Part {
    let mime = if bytes.starts_with(&[0xFF, 0xD8]) { MIME_JPEG } else { MIME_PNG };
    Part::Image { mime: mime.to_string(), data: bytes }
}

/// Base64 helper for wire formats that embed images as strings.
pub fn encode_base64(bytes: &[u8]) -> String {
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

pub fn decode_base64(s: &str) -> Result<Vec<u8>, String> {
    base64::engine::general_purpose::STANDARD.decode(s).map_err(|e| e.to_string())
}
