//! HTTP backend speaking a minimal JSON chat / image schema.
//!
//! `POST {base}/v1/chat`   body `{"model", "parts", "params"}` → `{"text"}`
//! `POST {base}/v1/images` body `{"model", "prompt", "n", "width", "height", "seed"}` → `{"images": [base64 png]}`

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{
    decode_base64, note_network_attempt, BackendError, ChatBackend, ChatRequest, ImageBackend, ImageGenRequest,
};

pub const ENV_URL: &str = "NMID_BACKEND_URL";
pub const ENV_KEY: &str = "NMID_BACKEND_KEY";

#[derive(Debug, Clone)]
pub struct RemoteBackend {
    id: String,
    base_url: String,
    key: String,
    model: String,
}

#[derive(Deserialize)]
struct ChatBody {
    text: String,
}

#[derive(Deserialize)]
struct ImagesBody {
    images: Vec<String>,
}

impl RemoteBackend {
    pub fn new(
        id: impl Into<String>,
        base_url: impl Into<String>,
        key: impl Into<String>,
        model: impl Into<String>,
    ) -> Self {
        Self {
            id: id.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            key: key.into(),
            model: model.into(),
        }
    }

    /// Reads the endpoint and key from the environment.
    pub fn from_env(id: &str, model: &str) -> Result<Self, BackendError> {
        let url = std::env::var(ENV_URL).map_err(|_| BackendError::Permanent(format!("{ENV_URL} is not set")))?;
        let key = std::env::var(ENV_KEY).map_err(|_| BackendError::Permanent(format!("{ENV_KEY} is not set")))?;
        Ok(Self::new(id, url, key, model))
    }

    fn post<T: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: serde_json::Value,
        timeout: Duration,
    ) -> Result<T, BackendError> {
        note_network_attempt()?;
        let agent: ureq::Agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(false).build().into();
        let mut resp = agent
            .post(format!("{}{path}", self.base_url))
            .header("Authorization", format!("Bearer {}", self.key))
            .send_json(body)
            .map_err(classify)?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(BackendError::Permanent(format!("HTTP {status}")));
        }
        resp.body_mut().read_json::<T>().map_err(|e| BackendError::Permanent(format!("bad response body: {e}")))
    }
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::HostNotFound => {
            BackendError::Transient(e.to_string())
        }
        other => BackendError::Permanent(other.to_string()),
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn chat(&self, req: &ChatRequest, timeout: Duration) -> Result<String, BackendError> {
        let body = json!({ "model": self.model, "parts": req.parts, "params": req.params });
        let r: ChatBody = self.post("/v1/chat", body, timeout)?;
        Ok(r.text)
    }
}

impl ImageBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, req: &ImageGenRequest, timeout: Duration) -> Result<Vec<Vec<u8>>, BackendError> {
        let body = json!({
            "model": self.model, "prompt": req.prompt, "n": req.n,
            "width": req.width, "height": req.height, "seed": req.seed,
        });
        let r: ImagesBody = self.post("/v1/images", body, timeout)?;
        r.images.iter().map(|s| decode_base64(s).map_err(BackendError::Permanent)).collect()
    }
}
