use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use nmid_cli::server::{router, AppState, ServerOptions};
use nmid_core::curation::{CurationStore, NewItem, SourceRef};
use nmid_core::gateway::{sha256_hex, ImageRef};
use nmid_core::io::{DatasetManifest, ManifestRecord, Split};
use nmid_core::prompts::{QaPair, VqaTranscript};

fn train() -> DatasetManifest {
    let rec = |id: &str, label: &str, split| ManifestRecord {
        id: id.into(),
        path: format!("/data/{id}.png"),
        label: label.into(),
        split,
        hardness: None,
    };
    DatasetManifest::new(vec![rec("rings/1", "rings", Split::Train), rec("tips/1", "tips", Split::Train)]).unwrap()
}

fn new_item(dir: &Path, tag: &str, label: &str, n: usize) -> NewItem {
    let synthetics = (0..n)
        .map(|i| {
            let bytes = [&[0x89u8, b'P', b'N', b'G'][..], format!("{tag}-{i}").as_bytes()].concat();
            let digest = sha256_hex(&bytes);
            let path = dir.join(format!("{digest}.png"));
            std::fs::write(&path, &bytes).unwrap();
            ImageRef { digest, path }
        })
        .collect();
    NewItem {
        source: SourceRef {
            image_id: tag.into(),
            path: dir.join("src.png"),
            digest: sha256_hex(tag.as_bytes()),
            label: label.into(),
        },
        transcript: VqaTranscript {
            image_id: tag.into(),
            pairs: vec![QaPair { prompt_id: 1, question: "texture?".into(), answer: format!("{tag} texture") }],
            backend: "mock-vqa".into(),
            ts: 1,
        },
        synthetics,
        salt: 0,
    }
}

struct Fixture {
    dir: tempfile::TempDir,
    app: Router,
}

fn fixture(token: Option<&str>) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let store = CurationStore::open(&dir.path().join("review")).unwrap();
    let state = Arc::new(AppState { store, train: train(), token: token.map(String::from) });
    Fixture { app: router(state, &ServerOptions::default()), dir }
}

async fn call(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
    token: Option<&str>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(t) = token {
        req = req.header(header::AUTHORIZATION, format!("Bearer {t}"));
    }
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn enqueue(f: &Fixture, tag: &str, label: &str, n: usize) -> String {
    let item = serde_json::to_value(new_item(f.dir.path(), tag, label, n)).unwrap();
    let (s, v) = json_call(&f.app, Method::POST, "/api/items", Some(item)).await;
    assert_eq!(s, StatusCode::CREATED);
    v["id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn decision_is_visible_and_final() {
    let f = fixture(None);
    let id = enqueue(&f, "a", "rings", 2).await;
    let uri = format!("/api/items/{id}/decision");
    let (s, v) = json_call(&f.app, Method::POST, &uri, Some(json!({"verdict": "accept", "note": "looks right"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "accepted");

    let (s, v) = json_call(&f.app, Method::GET, &format!("/api/items/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["decision"]["verdict"], "accept");
    assert_eq!(v["decision"]["note"], "looks right");

    let (s, v) = json_call(&f.app, Method::POST, &uri, Some(json!({"verdict": "reject"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].is_string());
}

#[tokio::test]
async fn queue_filters_by_status() {
    let f = fixture(None);
    let mut ids = Vec::new();
    for tag in ["a", "b", "c"] {
        ids.push(enqueue(&f, tag, "tips", 1).await);
    }
    for (id, verdict) in [(&ids[0], "accept"), (&ids[2], "reject")] {
        let (s, _) =
            json_call(&f.app, Method::POST, &format!("/api/items/{id}/decision"), Some(json!({"verdict": verdict})))
                .await;
        assert_eq!(s, StatusCode::OK);
    }
    let count = |v: &Value| v.as_array().unwrap().len();
    let (_, pending) = json_call(&f.app, Method::GET, "/api/queue?status=pending", None).await;
    assert_eq!(count(&pending), 1);
    assert_eq!(pending[0]["id"], ids[1].as_str());
    let (_, all) = json_call(&f.app, Method::GET, "/api/queue", None).await;
    let order: Vec<&str> = all.as_array().unwrap().iter().map(|v| v["id"].as_str().unwrap()).collect();
    assert_eq!(order, ids.iter().map(String::as_str).collect::<Vec<_>>());
    let (s, _) = json_call(&f.app, Method::GET, "/api/queue?status=maybe", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn duplicate_enqueue_returns_existing() {
    let f = fixture(None);
    let id = enqueue(&f, "a", "rings", 1).await;
    let item = serde_json::to_value(new_item(f.dir.path(), "a", "rings", 1)).unwrap();
    let (s, v) = json_call(&f.app, Method::POST, "/api/items", Some(item)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["id"], id.as_str());
}

#[tokio::test]
async fn bad_requests() {
    let f = fixture(None);
    let (s, _) = json_call(&f.app, Method::GET, "/api/items/nope", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&f.app, Method::POST, "/api/items/nope/decision", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = json_call(&f.app, Method::POST, "/api/items", Some(json!({"source": 3}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut empty = serde_json::to_value(new_item(f.dir.path(), "z", "tips", 1)).unwrap();
    empty["synthetics"] = json!([]);
    let (s, _) = json_call(&f.app, Method::POST, "/api/items", Some(empty)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let id = enqueue(&f, "a", "tips", 1).await;
    let (s, _) =
        json_call(&f.app, Method::POST, &format!("/api/items/{id}/decision"), Some(json!({"verdict": "perhaps"})))
            .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn augmented_manifest_inherits_source_label() {
    let f = fixture(None);
    let accepted = enqueue(&f, "a", "rings", 2).await;
    let rejected = enqueue(&f, "b", "tips", 1).await;
    enqueue(&f, "c", "tips", 1).await;
    for (id, v) in [(&accepted, "accept"), (&rejected, "reject")] {
        json_call(&f.app, Method::POST, &format!("/api/items/{id}/decision"), Some(json!({"verdict": v}))).await;
    }
    let (s, m) = json_call(&f.app, Method::GET, "/api/manifest/augmented", None).await;
    assert_eq!(s, StatusCode::OK);
    let recs = m["records"].as_array().unwrap();
    assert_eq!(recs.len(), 2 + 2);
    let synth: Vec<&Value> = recs.iter().filter(|r| !r["provenance"].is_null()).collect();
    assert_eq!(synth.len(), 2);
    assert!(synth.iter().all(|r| r["label"] == "rings" && r["provenance"] == accepted.as_str()));
}

#[tokio::test]
async fn assets_are_served_by_digest() {
    let f = fixture(None);
    let id = enqueue(&f, "a", "rings", 1).await;
    let (_, item) = json_call(&f.app, Method::GET, &format!("/api/items/{id}"), None).await;
    let digest = item["synthetics"][0]["digest"].as_str().unwrap();
    let (s, bytes) = call(&f.app, Method::GET, &format!("/assets/{digest}"), None, None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(sha256_hex(&bytes), digest);
    let (s, _) = call(&f.app, Method::GET, &format!("/assets/{}", "0".repeat(64)), None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&f.app, Method::GET, "/assets/..%2F..%2Fetc", None, None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn token_is_enforced() {
    let f = fixture(Some("s3cret"));
    let (s, _) = call(&f.app, Method::GET, "/api/queue", None, None).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&f.app, Method::GET, "/api/queue", None, Some("wrong")).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = call(&f.app, Method::GET, "/api/queue", None, Some("s3cret")).await;
    assert_eq!(s, StatusCode::OK);
    let (s, _) = call(&f.app, Method::GET, "/api/queue?token=s3cret", None, None).await;
    assert_eq!(s, StatusCode::OK);
}
