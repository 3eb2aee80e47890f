use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use kgrag::config::Config;
use kgrag::orchestrator::Engine;
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn corpus() -> Vec<PathBuf> {
    ["jiazao.md", "simiao.md", "zhefu.md"].iter().map(|n| fixtures().join("corpus").join(n)).collect()
}

fn engine(store: &Path) -> Arc<Engine> {
    let mut config = Config::from_file(&fixtures().join("kgrag.toml")).unwrap();
    config.store.path = store.to_path_buf();
    Arc::new(Engine::open(config).unwrap())
}

fn ingested(store: &Path) -> Arc<Engine> {
    let engine = engine(store);
    assert!(engine.ingest(&corpus()).unwrap().failed.is_empty());
    engine
}

async fn call(app: &Router, request: Request<Body>) -> (StatusCode, Vec<u8>) {
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, body) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (status, serde_json::from_slice(&body).unwrap())
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

/// `(event name, data)` pairs of an SSE body.
fn sse_events(body: &[u8]) -> Vec<(String, Value)> {
    let text = std::str::from_utf8(body).unwrap();
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = None;
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event: ") {
                    name = Some(v.to_string());
                } else if let Some(v) = line.strip_prefix("data: ") {
                    data = Some(serde_json::from_str(v).unwrap());
                }
            }
            Some((name?, data?))
        })
        .collect()
}

#[tokio::test]
async fn stats_and_health() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(ingested(dir.path()));
    let (status, stats) = get_json(&app, "/api/v1/graph/stats").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stats, json!({"nodes": 5, "edges": 4, "chunks": 3}));
    let (status, health) = get_json(&app, "/api/v1/healthz").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(health["status"], "ok");
}

#[tokio::test]
async fn search_returns_the_node_with_its_edges_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(ingested(dir.path()));
    let (status, result) = get_json(&app, "/api/v1/graph/search?q=Zhefu&k=5").await;
    assert_eq!(status, StatusCode::OK);
    let nodes = result["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 1);
    assert_eq!(nodes[0]["node_id"], "zhefu 802");
    let provenance = nodes[0]["provenance"].as_array().unwrap();
    assert_eq!(provenance.len(), 1);
    assert!(provenance[0]["excerpt"].as_str().unwrap().contains("Zhefu 802"));
    let edges: Vec<(String, String)> = result["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["src"].as_str().unwrap().to_string(), e["dst"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(edges.len(), 2);
    assert!(edges.iter().all(|(s, d)| s == "zhefu 802" || d == "zhefu 802"));

    let (status, _) = get_json(&app, "/api/v1/graph/search?q=%20").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn search_without_a_name_match_falls_back_to_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(ingested(dir.path()));
    let (_, result) = get_json(&app, "/api/v1/graph/search?q=tall%20indica%20parent&k=2").await;
    let nodes = result["nodes"].as_array().unwrap();
    assert_eq!(nodes.len(), 2);
    let scores: Vec<f64> = nodes.iter().map(|n| n["score"].as_f64().unwrap()).collect();
    assert!(scores[0] >= scores[1]);
}

#[tokio::test]
async fn query_streams_stage_events_then_done() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(ingested(dir.path()));
    let request = post("/api/v1/query", json!({"question": "How much taller is Simiao 8 than Zhefu 802?"}));
    let (status, body) = call(&app, request).await;
    assert_eq!(status, StatusCode::OK);
    let events = sse_events(&body);
    assert_eq!(events[0].0, "stage");
    assert_eq!(events[0].1, json!({"name": "intent", "status": "started", "detail": ""}));
    let (last, data) = events.last().unwrap();
    assert_eq!(last, "done");
    assert_eq!(data["final_path"], "logic_form");
    assert_eq!(data["answer"], "Simiao 8 is 15 cm taller than Zhefu 802.");
    assert!(events.iter().any(|(n, d)| n == "verdict" && d["verdict"] == "supported"));
    let tokens: String =
        events.iter().filter(|(n, _)| n == "token").map(|(_, d)| d["text"].as_str().unwrap()).collect();
    assert_eq!(tokens, "Simiao 8 is 15 cm taller than Zhefu 802.");
}

#[tokio::test]
async fn forced_mode_is_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(ingested(dir.path()));
    let request = post("/api/v1/query", json!({"question": "Where was Simiao 8 first grown?", "mode": "logic"}));
    let (_, body) = call(&app, request).await;
    let events = sse_events(&body);
    let (last, data) = events.last().unwrap();
    assert_eq!(last, "done");
    assert_eq!(data["final_path"], "logic_form_unverified");
    assert!(events.iter().all(|(n, d)| n != "stage" || d["name"] != "dual_level" || d["status"] == "skipped"));
}

#[tokio::test]
async fn query_errors_become_error_events_or_statuses() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(engine(dir.path()));
    let (_, body) = call(&app, post("/api/v1/query", json!({"question": "Anything?"}))).await;
    let events = sse_events(&body);
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].0, "error");

    let (status, _) = call(&app, post("/api/v1/query", json!({"question": "  "}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, post("/api/v1/query", json!({"question": "x", "mode": "sideways"}))).await;
    assert!(status.is_client_error());
}

#[tokio::test]
async fn ingest_job_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(engine(dir.path()));
    let (status, body) = call(&app, post("/api/v1/ingest", json!({"paths": [fixtures().join("corpus")]}))).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let job_id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string();

    let mut job = Value::Null;
    for _ in 0..200 {
        job = get_json(&app, &format!("/api/v1/jobs/{job_id}")).await.1;
        if job["state"] == "succeeded" || job["state"] == "failed" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(job["state"], "succeeded", "{job}");
    assert_eq!(job["report"]["chunks_ingested"], 3);
    assert_eq!(get_json(&app, "/api/v1/graph/stats").await.1, json!({"nodes": 5, "edges": 4, "chunks": 3}));

    let (status, _) = get_json(&app, "/api/v1/jobs/job-999").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, post("/api/v1/ingest", json!({"paths": []}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn failed_ingest_is_reported_on_the_job() {
    let dir = tempfile::tempdir().unwrap();
    let app = kgrag_server::router(engine(dir.path()));
    let missing = dir.path().join("missing.md");
    let (_, body) = call(&app, post("/api/v1/ingest", json!({"paths": [missing]}))).await;
    let job_id = serde_json::from_slice::<Value>(&body).unwrap()["job_id"].as_str().unwrap().to_string();
    let mut job = Value::Null;
    for _ in 0..200 {
        job = get_json(&app, &format!("/api/v1/jobs/{job_id}")).await.1;
        if job["state"] == "failed" || job["state"] == "succeeded" {
            break;
        }
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
    assert_eq!(job["state"], "failed");
    assert!(job["error"].as_str().is_some_and(|e| !e.is_empty()));
}
