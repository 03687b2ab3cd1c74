use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nmid_core::curation::*;
use nmid_core::gateway::{sha256_hex, ImageRef};
use nmid_core::io::{DatasetManifest, ManifestRecord, Split};
use nmid_core::prompts::{QaPair, VqaTranscript};
use proptest::prelude::*;

fn train_manifest() -> DatasetManifest {
    let rec = |id: &str, label: &str, split| ManifestRecord {
        id: id.into(),
        path: format!("/data/{id}.png"),
        label: label.into(),
        split,
        hardness: None,
    };
    DatasetManifest::new(vec![
        rec("a/1", "particles", Split::Train),
        rec("a/2", "particles", Split::Test),
        rec("b/1", "tips", Split::Train),
    ])
    .unwrap()
}

/// An item whose `n` synthetic files really exist under `dir`.
fn item(dir: &Path, tag: &str, label: &str, n: usize) -> NewItem {
    let synthetics = (0..n)
        .map(|i| {
            let bytes = format!("{tag}-{i}").into_bytes();
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
            pairs: vec![QaPair { prompt_id: 2, question: "shape?".into(), answer: format!("{tag} shape") }],
            backend: "mock-vqa".into(),
            ts: 7,
        },
        synthetics,
        salt: 0,
    }
}

fn ticking() -> TimeSource {
    let t = Arc::new(AtomicU64::new(1000));
    Arc::new(move || t.fetch_add(1, Ordering::SeqCst))
}

#[test]
fn enqueue_order_is_preserved() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open_with_clock(dir.path(), ticking()).unwrap();
    let ids: Vec<String> =
        (0..5).map(|i| s.enqueue(item(dir.path(), &format!("i{i}"), "tips", 1)).unwrap().0.id).collect();
    let pending: Vec<String> = s.list(Some(Status::Pending)).into_iter().map(|it| it.id).collect();
    assert_eq!(pending, ids);
}

#[test]
fn decisions_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = {
        let s = CurationStore::open_with_clock(dir.path(), ticking()).unwrap();
        let a = s.enqueue(item(dir.path(), "a", "tips", 2)).unwrap().0.id;
        let b = s.enqueue(item(dir.path(), "b", "tips", 2)).unwrap().0.id;
        let c = s.enqueue(item(dir.path(), "c", "tips", 2)).unwrap().0.id;
        s.decide(&a, Verdict::Accept, "matches").unwrap();
        s.decide(&b, Verdict::Reject, "wrong morphology").unwrap();
        (a, b, c)
    };
    let s = CurationStore::open(dir.path()).unwrap();
    assert_eq!(s.get(&a).unwrap().status, Status::Accepted);
    let rb = s.get(&b).unwrap();
    assert_eq!(rb.status, Status::Rejected);
    assert_eq!(rb.decision.unwrap().note, "wrong morphology");
    assert_eq!(s.list(Some(Status::Pending)).len(), 1);
    assert_eq!(s.list(Some(Status::Pending))[0].id, c);
    assert!(matches!(s.decide(&a, Verdict::Reject, ""), Err(CurationError::AlreadyDecided(_))));
    assert_eq!(replay(&s.log_path()).unwrap(), s.snapshot());
}

#[test]
fn zero_accepted_equals_train_split() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open(dir.path()).unwrap();
    let id = s.enqueue(item(dir.path(), "r", "tips", 3)).unwrap().0.id;
    s.decide(&id, Verdict::Reject, "").unwrap();
    s.enqueue(item(dir.path(), "p", "tips", 3)).unwrap();
    let m = s.augmented_manifest(&train_manifest()).unwrap();
    let ids: Vec<&str> = m.records.iter().map(|r| r.id.as_str()).collect();
    assert_eq!(ids, ["a/1", "b/1"]);
    assert_eq!(m.synthetic_count(), 0);
}

#[test]
fn accepted_items_append_in_decision_order() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open(dir.path()).unwrap();
    let first = s.enqueue(item(dir.path(), "x", "particles", 3)).unwrap().0.id;
    let second = s.enqueue(item(dir.path(), "y", "tips", 3)).unwrap().0.id;
    s.decide(&second, Verdict::Accept, "").unwrap();
    s.decide(&first, Verdict::Accept, "").unwrap();
    let m = s.augmented_manifest(&train_manifest()).unwrap();
    assert_eq!(m.records.len(), 2 + 6);
    assert_eq!(m.synthetic_count(), 6);
    let prov: Vec<&str> = m.records[2..].iter().map(|r| r.provenance.as_deref().unwrap()).collect();
    assert_eq!(prov, [&second, &second, &second, &first, &first, &first].map(|s| s.as_str()));
    for r in &m.records[2..] {
        let src = s.get(r.provenance.as_ref().unwrap()).unwrap();
        assert_eq!(r.label, src.source.label);
    }
    assert!(audit(&m, &s.snapshot()).is_empty());
    let dm = m.to_dataset_manifest().unwrap();
    assert_eq!(dm.len(), 8);
    assert!(dm.records.iter().all(|r| r.split == Split::Train));
}

#[test]
fn missing_synthetic_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open(dir.path()).unwrap();
    let it = item(dir.path(), "gone", "tips", 1);
    std::fs::remove_file(&it.synthetics[0].path).unwrap();
    let id = s.enqueue(it).unwrap().0.id;
    s.decide(&id, Verdict::Accept, "").unwrap();
    assert!(matches!(s.augmented_manifest(&train_manifest()), Err(CurationError::MissingSynthetic(_))));
}

#[test]
fn racing_decisions_admit_one_winner() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open(dir.path()).unwrap();
    let id = s.enqueue(item(dir.path(), "race", "tips", 1)).unwrap().0.id;
    let wins: usize = std::thread::scope(|sc| {
        let hs: Vec<_> = (0..8)
            .map(|i| {
                let (s, id) = (&s, &id);
                sc.spawn(move || {
                    let v = if i % 2 == 0 { Verdict::Accept } else { Verdict::Reject };
                    s.decide(id, v, "").is_ok() as usize
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).sum()
    });
    assert_eq!(wins, 1);
    assert_eq!(replay(&s.log_path()).unwrap(), s.snapshot());
}

#[test]
fn asset_lookup() {
    let dir = tempfile::tempdir().unwrap();
    let s = CurationStore::open(dir.path()).unwrap();
    let it = item(dir.path(), "z", "tips", 2);
    let synth = it.synthetics[1].clone();
    let src_digest = it.source.digest.clone();
    s.enqueue(it).unwrap();
    assert_eq!(s.asset_path(&synth.digest), Some(synth.path));
    assert_eq!(s.asset_path(&src_digest), Some(dir.path().join("src.png")));
    assert_eq!(s.asset_path("0000"), None);
}

#[derive(Debug, Clone)]
enum Op {
    Enqueue(u8),
    Decide(u8, bool),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        prop_oneof![(0u8..6).prop_map(Op::Enqueue), (0u8..6, any::<bool>()).prop_map(|(i, a)| Op::Decide(i, a))],
        1..25,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn replay_and_monotonicity(ops in ops()) {
        let dir = tempfile::tempdir().unwrap();
        let s = CurationStore::open_with_clock(dir.path(), ticking()).unwrap();
        let train = train_manifest();
        let mut prev = s.augmented_manifest(&train).unwrap();
        let mut ids: Vec<Option<String>> = vec![None; 6];
        for op in ops {
            match op {
                Op::Enqueue(i) => {
                    let id = s.enqueue(item(dir.path(), &format!("t{i}"), "tips", 1 + i as usize % 3)).unwrap().0.id;
                    ids[i as usize] = Some(id);
                }
                Op::Decide(i, accept) => {
                    if let Some(id) = &ids[i as usize] {
                        let _ = s.decide(id, if accept { Verdict::Accept } else { Verdict::Reject }, "");
                    }
                }
            }
            let m = s.augmented_manifest(&train).unwrap();
            prop_assert!(m.records.starts_with(&prev.records));
            prop_assert!(audit(&m, &s.snapshot()).is_empty());
            prev = m;
        }
        prop_assert_eq!(replay(&s.log_path()).unwrap(), s.snapshot());
    }
}
