use std::net::SocketAddr;
use std::path::Path;
use std::sync::OnceLock;
use std::time::Duration;

use medfuse_core::api::{RunState, RunStatus, SnapshotSummary};
use medfuse_core::cohort::{CohortSpec, IcdVersion};
use medfuse_core::export::sha256_hex;
use medfuse_core::forge::{forge_corpus, ForgeConfig, GroundTruthManifest};
use medfuse_core::ingest::load_snapshot;
use medfuse_core::pipeline::{preview_cohort, preview_widths, CohortPreview, RunConfig, WidthsPreview, WidthsQuery};
use medfuse_server::{router, AppState};
use reqwest::StatusCode;
use serde_json::{json, Value};

struct Corpus {
    dir: tempfile::TempDir,
    manifest: GroundTruthManifest,
}

fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let manifest = forge_corpus(&ForgeConfig::with_seed(21, 40), dir.path()).unwrap();
        Corpus { dir, manifest }
    })
}

async fn spawn() -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(AppState::new())).await.unwrap() });
    format!("http://{addr}")
}

async fn post(base: &str, path: &str, body: Value) -> (StatusCode, Value) {
    let resp = reqwest::Client::new()
        .post(format!("{base}{path}"))
        .json(&body)
        .send()
        .await
        .unwrap();
    let status = resp.status();
    (status, resp.json().await.unwrap())
}

async fn get(base: &str, path: &str) -> (StatusCode, Vec<u8>) {
    let resp = reqwest::get(format!("{base}{path}")).await.unwrap();
    (resp.status(), resp.bytes().await.unwrap().to_vec())
}

async fn loaded() -> String {
    let base = spawn().await;
    let (status, _) = post(&base, "/snapshot/load", json!({ "dataset_root": corpus().dir.path() })).await;
    assert_eq!(status, StatusCode::OK);
    base
}

async fn wait(base: &str, id: &str) -> RunStatus {
    for _ in 0..600 {
        let (code, body) = get(base, &format!("/run/{id}/report")).await;
        assert_eq!(code, StatusCode::OK);
        let status: RunStatus = serde_json::from_slice(&body).unwrap();
        if status.state.is_terminal() {
            return status;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    panic!("run {id} did not finish");
}

#[tokio::test]
async fn previews_need_a_snapshot() {
    let base = spawn().await;
    let (status, body) = post(&base, "/cohort/preview", json!({ "cohort": { "mode": "all_subjects" } })).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["error"], "no_snapshot");
}

#[tokio::test]
async fn load_reports_the_snapshot() {
    let base = spawn().await;
    let (status, body) = post(&base, "/snapshot/load", json!({ "dataset_root": corpus().dir.path() })).await;
    assert_eq!(status, StatusCode::OK);
    let summary: SnapshotSummary = serde_json::from_value(body).unwrap();
    assert_eq!(summary.admissions, corpus().manifest.admissions.len());
    assert_eq!(summary.subjects, 40);
    assert_eq!(summary.rejects, 0);
    assert!(summary.tables.contains_key("diagnoses_icd"));

    let (status, body) = post(&base, "/snapshot/load", json!({ "dataset_root": "/no/such/dir" })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "dataset_root");
}

#[tokio::test]
async fn malformed_bodies_are_400() {
    let base = loaded().await;
    let resp = reqwest::Client::new()
        .post(format!("{base}/cohort/preview"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let body: Value = resp.json().await.unwrap();
    assert_eq!(body["error"], "invalid_json");

    let (status, _) = post(&base, "/cohort/preview", json!({ "cohort": { "mode": "sometimes" } })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn cohort_preview_matches_direct_call() {
    let base = loaded().await;
    let snapshot = load_snapshot(corpus().dir.path(), "mimic-iv").unwrap();

    let (status, body) = post(&base, "/cohort/preview", json!({ "cohort": { "mode": "all_subjects" } })).await;
    assert_eq!(status, StatusCode::OK);
    let all: CohortPreview = serde_json::from_value(body).unwrap();
    assert_eq!(all.admissions, corpus().manifest.admissions.len());

    let spec = CohortSpec::codes(IcdVersion::Both, ["427*", "I48*"]);
    let (status, body) = post(&base, "/cohort/preview", json!({ "cohort": spec })).await;
    assert_eq!(status, StatusCode::OK);
    let got: CohortPreview = serde_json::from_value(body).unwrap();
    assert_eq!(got, preview_cohort(&snapshot, &spec).unwrap());

    let (status, body) = post(&base, "/cohort/preview", json!({ "cohort": { "mode": "icd", "code_patterns": [] } })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "invalid_config");
    assert_eq!(body["field"], "code_patterns");
}

#[tokio::test]
async fn align_preview_matches_direct_call() {
    let base = loaded().await;
    let snapshot = load_snapshot(corpus().dir.path(), "mimic-iv").unwrap();
    let mut prev_total = usize::MAX;
    for k in [100.0, 95.0, 90.0, 75.0, 50.0] {
        let query: WidthsQuery = serde_json::from_value(json!({
            "cohort": { "mode": "all_subjects" },
            "granularity": "day",
            "percentile_k": k,
        }))
        .unwrap();
        let (status, body) = post(&base, "/align/preview", serde_json::to_value(&query).unwrap()).await;
        assert_eq!(status, StatusCode::OK);
        let got: WidthsPreview = serde_json::from_value(body).unwrap();
        assert_eq!(got, preview_widths(&snapshot, &query).unwrap());
        if k == 100.0 {
            assert_eq!(got.dropped_rows, 0);
        }
        let total: usize = got.widths.values().sum();
        assert!(total <= prev_total);
        prev_total = total;
    }
    let (status, body) = post(
        &base,
        "/align/preview",
        json!({ "cohort": { "mode": "all_subjects" }, "percentile_k": 0 }),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "percentile_k");
}

#[tokio::test]
async fn concurrent_previews_agree() {
    let base = loaded().await;
    let body = json!({ "cohort": { "mode": "all_subjects" }, "granularity": "hour", "percentile_k": 90 });
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (base, body) = (base.clone(), body.clone());
            tokio::spawn(async move { post(&base, "/align/preview", body).await })
        })
        .collect();
    let mut results = Vec::new();
    for h in handles {
        results.push(h.await.unwrap());
    }
    for r in &results {
        assert_eq!(r.0, StatusCode::OK);
        assert_eq!(r.1, results[0].1);
    }
}

fn run_config(out: &Path) -> RunConfig {
    RunConfig::new(corpus().dir.path(), CohortSpec::all_subjects(), out)
}

#[tokio::test]
async fn run_lifecycle_and_artifacts() {
    let base = loaded().await;
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let (status, body) = post(&base, "/run", serde_json::to_value(run_config(&out)).unwrap()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["run_id"].as_str().unwrap().to_string();

    let done = wait(&base, &id).await;
    assert_eq!(done.state, RunState::Done, "{:?}", done.error);
    let report = done.report.unwrap();
    assert!(report.rows > 0);
    for a in &report.artifacts {
        let (code, bytes) = get(&base, &format!("/run/{id}/artifact/{}", a.name)).await;
        assert_eq!(code, StatusCode::OK);
        assert_eq!(bytes, std::fs::read(out.join(&a.name)).unwrap());
        assert_eq!(sha256_hex(&bytes), a.sha256);
    }
    let (code, bytes) = get(&base, &format!("/run/{id}/artifact/report.json")).await;
    assert_eq!(code, StatusCode::OK);
    let on_disk: Value = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(on_disk["rows"], report.rows);

    let (code, _) = get(&base, &format!("/run/{id}/artifact/secret.txt")).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = get(&base, &format!("/run/{id}/artifact/..%2F..%2Fetc%2Fpasswd")).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    let (code, _) = get(&base, "/run/run-999/report").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn run_without_loaded_snapshot_loads_its_own() {
    let base = spawn().await;
    let tmp = tempfile::tempdir().unwrap();
    let (status, body) = post(&base, "/run", serde_json::to_value(run_config(tmp.path())).unwrap()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let done = wait(&base, body["run_id"].as_str().unwrap()).await;
    assert_eq!(done.state, RunState::Done);
    let stages: Vec<_> = done.report.unwrap().stages.into_iter().map(|s| s.stage).collect();
    assert!(stages.contains(&"load".to_string()));
}

#[tokio::test]
async fn invalid_run_config_is_rejected_up_front() {
    let base = loaded().await;
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = run_config(tmp.path());
    cfg.plan.percentile_k = 150.0;
    let (status, body) = post(&base, "/run", serde_json::to_value(&cfg).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "percentile_k");

    let mut cfg = run_config(tmp.path());
    cfg.dataset_root = "/no/such/root".into();
    let (status, body) = post(&base, "/run", serde_json::to_value(&cfg).unwrap()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["field"], "dataset_root");

    let (status, _) = post(&base, "/run", json!({ "cohort": { "mode": "all_subjects" } })).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn failing_stage_is_reported() {
    let base = spawn().await;
    let broken = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(corpus().dir.path()).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_str().unwrap().to_string();
        if p.is_file() && name.ends_with(".csv") && name != "d_icd_diagnoses.csv" {
            std::fs::copy(&p, broken.path().join(&name)).unwrap();
        }
    }
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig::new(broken.path(), CohortSpec::names(IcdVersion::Both, ["sepsis"]), out.path().join("x"));
    let (status, body) = post(&base, "/run", serde_json::to_value(&cfg).unwrap()).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let id = body["run_id"].as_str().unwrap().to_string();
    let failed = wait(&base, &id).await;
    assert_eq!(failed.state, RunState::Failed);
    assert_eq!(failed.failed_stage.as_deref(), Some("search"));
    assert!(!out.path().join("x").exists());
    let (code, _) = get(&base, &format!("/run/{id}/artifact/integrated.csv")).await;
    assert_eq!(code, StatusCode::CONFLICT);
}
