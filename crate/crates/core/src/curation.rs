//! Human review of generated descriptions and synthetic images. State lives
//! in an append-only JSONL event log and is rebuilt by replaying it.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{sha256_hex, ImageRef};
use crate::io::{DatasetError, DatasetManifest, ManifestRecord, Split};
use crate::prompts::{PromptError, VqaTranscript};

pub const LOG_FILE: &str = "curation.log.jsonl";

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("malformed item: {0}")]
    Malformed(String),
    #[error(transparent)]
    Transcript(#[from] PromptError),
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("item {0} has already been decided")]
    AlreadyDecided(String),
    #[error("synthetic image missing: {0}")]
    MissingSynthetic(PathBuf),
    #[error("log line {line}: {reason}")]
    Log { line: usize, reason: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Accepted,
    Rejected,
}

impl std::str::FromStr for Status {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "pending" => Ok(Status::Pending),
            "accepted" => Ok(Status::Accepted),
            "rejected" => Ok(Status::Rejected),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Accept,
    Reject,
}

/// The real image a transcript and its synthetics were derived from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRef {
    pub image_id: String,
    pub path: PathBuf,
    pub digest: String,
    pub label: String,
}

/// Enqueue payload. `salt` lets a reviewer re-queue identical content.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewItem {
    pub source: SourceRef,
    pub transcript: VqaTranscript,
    pub synthetics: Vec<ImageRef>,
    #[serde(default)]
    pub salt: u32,
}

impl NewItem {
    pub fn validate(&self) -> Result<(), CurationError> {
        if self.synthetics.is_empty() {
            return Err(CurationError::Malformed("item has no synthetic images".into()));
        }
        if self.source.label.trim().is_empty() || self.source.image_id.is_empty() {
            return Err(CurationError::Malformed("source image needs an id and a label".into()));
        }
        self.transcript.validate()?;
        Ok(())
    }

    /// Content digest, used as the item id.
    pub fn content_id(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("item serialises"))[..32].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub verdict: Verdict,
    pub note: String,
    pub ts: u64,
    /// Position of the decision event in the log.
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub source: SourceRef,
    pub transcript: VqaTranscript,
    pub synthetics: Vec<ImageRef>,
    pub salt: u32,
    pub status: Status,
    pub decision: Option<Decision>,
    pub enqueued_ts: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Enqueued { item_id: String, payload: NewItem, ts: u64 },
    Decided { item_id: String, verdict: Verdict, note: String, ts: u64 },
}

/// Items in enqueue order plus an id index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurationState {
    items: Vec<ReviewItem>,
    index: HashMap<String, usize>,
    events: u64,
}

impl CurationState {
    pub fn apply(&mut self, ev: &LogEvent) -> Result<(), CurationError> {
        match ev {
            LogEvent::Enqueued { item_id, payload, ts } => {
                if self.index.contains_key(item_id) {
                    return Ok(());
                }
                self.index.insert(item_id.clone(), self.items.len());
                self.items.push(ReviewItem {
                    id: item_id.clone(),
                    source: payload.source.clone(),
                    transcript: payload.transcript.clone(),
                    synthetics: payload.synthetics.clone(),
                    salt: payload.salt,
                    status: Status::Pending,
                    decision: None,
                    enqueued_ts: *ts,
                });
            }
            LogEvent::Decided { item_id, verdict, note, ts } => {
                let &i = self.index.get(item_id).ok_or_else(|| CurationError::UnknownItem(item_id.clone()))?;
                let item = &mut self.items[i];
                if item.status != Status::Pending {
                    return Err(CurationError::AlreadyDecided(item_id.clone()));
                }
                item.status = match verdict {
                    Verdict::Accept => Status::Accepted,
                    Verdict::Reject => Status::Rejected,
                };
                item.decision = Some(Decision { verdict: *verdict, note: note.clone(), ts: *ts, seq: self.events });
            }
        }
        self.events += 1;
        Ok(())
    }

    pub fn items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn list(&self, status: Option<Status>) -> Vec<ReviewItem> {
        self.items.iter().filter(|it| status.is_none_or(|s| it.status == s)).cloned().collect()
    }
}

/// Rebuilds state from a log file. A missing file is an empty log.
pub fn replay(path: &Path) -> Result<CurationState, CurationError> {
    let mut state = CurationState::default();
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(state),
        Err(e) => return Err(e.into()),
    };
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let ev: LogEvent =
            serde_json::from_str(line).map_err(|e| CurationError::Log { line: n + 1, reason: e.to_string() })?;
        state.apply(&ev).map_err(|e| CurationError::Log { line: n + 1, reason: e.to_string() })?;
    }
    Ok(state)
}

pub type TimeSource = Arc<dyn Fn() -> u64 + Send + Sync>;

fn unix_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

struct Inner {
    state: CurationState,
    log: File,
}

/// Review queue backed by `<dir>/curation.log.jsonl`. Writers are serialised
/// through one lock; readers share it.
pub struct CurationStore {
    dir: PathBuf,
    inner: RwLock<Inner>,
    now: TimeSource,
}

/// One augmented training record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedRecord {
    pub id: String,
    pub path: PathBuf,
    pub label: String,
    /// Review item the image came from; `None` for original records.
    pub provenance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentedManifest {
    pub records: Vec<AugmentedRecord>,
}

impl AugmentedManifest {
    pub fn synthetic_count(&self) -> usize {
        self.records.iter().filter(|r| r.provenance.is_some()).count()
    }

    /// As a training manifest (everything in the train split).
    pub fn to_dataset_manifest(&self) -> Result<DatasetManifest, DatasetError> {
        DatasetManifest::new(
            self.records
                .iter()
                .map(|r| ManifestRecord {
                    id: r.id.clone(),
                    path: r.path.to_string_lossy().into_owned(),
                    label: r.label.clone(),
                    split: Split::Train,
                    hardness: None,
                })
                .collect(),
        )
    }
}

impl CurationStore {
    pub fn open(dir: &Path) -> Result<Self, CurationError> {
        Self::open_with_clock(dir, Arc::new(unix_millis))
    }

    pub fn open_with_clock(dir: &Path, now: TimeSource) -> Result<Self, CurationError> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOG_FILE);
        let state = replay(&path)?;
        let log = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(Self { dir: dir.to_path_buf(), inner: RwLock::new(Inner { state, log }), now })
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    fn append(inner: &mut Inner, ev: &LogEvent) -> Result<(), CurationError> {
        let mut line = serde_json::to_vec(ev).expect("event serialises");
        line.push(b'\n');
        inner.log.write_all(&line)?;
        inner.log.sync_data()?;
        Ok(())
    }

    /// Queues an item for review. Identical content maps to the same id and
    /// is only queued once; the bool reports whether it was new.
    pub fn enqueue(&self, item: NewItem) -> Result<(ReviewItem, bool), CurationError> {
        item.validate()?;
        let id = item.content_id();
        let mut inner = self.inner.write().unwrap();
        if let Some(existing) = inner.state.get(&id) {
            return Ok((existing.clone(), false));
        }
        let ev = LogEvent::Enqueued { item_id: id.clone(), payload: item, ts: (self.now)() };
        Self::append(&mut inner, &ev)?;
        inner.state.apply(&ev)?;
        Ok((inner.state.get(&id).expect("just enqueued").clone(), true))
    }

    pub fn decide(&self, id: &str, verdict: Verdict, note: &str) -> Result<ReviewItem, CurationError> {
        let mut inner = self.inner.write().unwrap();
        match inner.state.get(id) {
            None => return Err(CurationError::UnknownItem(id.to_string())),
            Some(it) if it.status != Status::Pending => return Err(CurationError::AlreadyDecided(id.to_string())),
            Some(_) => {}
        }
        let ev = LogEvent::Decided { item_id: id.to_string(), verdict, note: note.to_string(), ts: (self.now)() };
        Self::append(&mut inner, &ev)?;
        inner.state.apply(&ev)?;
        Ok(inner.state.get(id).expect("exists").clone())
    }

    pub fn get(&self, id: &str) -> Option<ReviewItem> {
        self.inner.read().unwrap().state.get(id).cloned()
    }

    pub fn list(&self, status: Option<Status>) -> Vec<ReviewItem> {
        self.inner.read().unwrap().state.list(status)
    }

    pub fn snapshot(&self) -> CurationState {
        self.inner.read().unwrap().state.clone()
    }

    /// File path for an image digest known to the queue (source or synthetic).
    pub fn asset_path(&self, digest: &str) -> Option<PathBuf> {
        let inner = self.inner.read().unwrap();
        inner.state.items().iter().find_map(|it| {
            if it.source.digest == digest {
                return Some(it.source.path.clone());
            }
            it.synthetics.iter().find(|s| s.digest == digest).map(|s| s.path.clone())
        })
    }

    pub fn augmented_manifest(&self, train: &DatasetManifest) -> Result<AugmentedManifest, CurationError> {
        build_augmented_manifest(train, &self.snapshot())
    }
}

/// Original train records first, then accepted synthetics in decision
/// order, each labelled like its source image.
pub fn build_augmented_manifest(
    train: &DatasetManifest,
    state: &CurationState,
) -> Result<AugmentedManifest, CurationError> {
    let mut records: Vec<AugmentedRecord> = train
        .records
        .iter()
        .filter(|r| r.split != Split::Test)
        .map(|r| AugmentedRecord {
            id: r.id.clone(),
            path: PathBuf::from(&r.path),
            label: r.label.clone(),
            provenance: None,
        })
        .collect();
    let mut accepted: Vec<&ReviewItem> = state.items().iter().filter(|it| it.status == Status::Accepted).collect();
    accepted.sort_by_key(|it| it.decision.as_ref().map(|d| d.seq));
    for it in accepted {
        for s in &it.synthetics {
            if !s.path.is_file() {
                return Err(CurationError::MissingSynthetic(s.path.clone()));
            }
            records.push(AugmentedRecord {
                id: format!("synthetic/{}/{}", it.id, s.digest),
                path: s.path.clone(),
                label: it.source.label.clone(),
                provenance: Some(it.id.clone()),
            });
        }
    }
    Ok(AugmentedManifest { records })
}

/// Ids of items whose synthetics should not be in `manifest` but are.
pub fn audit(manifest: &AugmentedManifest, state: &CurationState) -> Vec<String> {
    manifest
        .records
        .iter()
        .filter_map(|r| r.provenance.as_ref())
        .filter(|p| state.get(p).is_none_or(|it| it.status != Status::Accepted))
        .cloned()
        .collect()
}
