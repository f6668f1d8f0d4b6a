//! In-process harness for the HTTP API.

#![allow(dead_code)]

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use refocus::config::Config;
use refocus::service::{router, AppState};
use refocus_core::synth::{generate, SyntheticConfig, SyntheticDataset};
use refocus_core::train::TrainingParams;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub struct Fixture {
    pub dir: TempDir,
    pub data: SyntheticDataset,
    pub config: Config,
}

pub fn quick_params(epochs: usize) -> TrainingParams {
    TrainingParams {
        batch_size: 8,
        epochs,
        learning_rate: 3e-3,
        seed: 1,
        augmentation: false,
    }
}

/// A separable synthetic dataset written to disk plus a small-model config.
pub fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SyntheticConfig::separable(5);
    cfg.num_images = 60;
    let data = generate(&cfg).unwrap();
    refocus::ingest::write_dataset(&dir.path().join("dataset"), &data.manifest, &data.images).unwrap();
    let config = Config {
        data_dir: dir.path().join("state"),
        image_size: 32,
        training: quick_params(2),
        finetune: quick_params(2),
        ..Config::default()
    };
    Fixture { dir, data, config }
}

impl Fixture {
    pub fn open(&self) -> (Arc<AppState>, Router) {
        let app = AppState::open(self.config.clone()).unwrap();
        (app.clone(), router(app))
    }

    pub fn upload_body(&self) -> Value {
        json!({
            "root": self.dir.path().join("dataset"),
            "labels_file": "labels.csv",
            "image_size": 32,
            "ratios": [0.6, 0.2, 0.2],
            "seed": 1,
        })
    }

    /// File-based image id of synthetic item `index`.
    pub fn image_id(&self, index: usize) -> String {
        format!("{}.png", self.data.manifest.items[index].image_id)
    }
}

pub async fn raw(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = raw(app, method, uri, body).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, value)
}

/// Polls the job endpoint until the job leaves the running state.
pub async fn wait_job(app: &Router, sid: &str) -> Value {
    let started = Instant::now();
    loop {
        let (status, job) = call(app, Method::GET, &format!("/api/v1/sessions/{sid}/job"), None).await;
        assert_eq!(status, StatusCode::OK);
        if job["state"] != "running" {
            return job;
        }
        assert!(started.elapsed() < Duration::from_secs(600), "job did not finish");
        tokio::time::sleep(Duration::from_millis(25)).await;
    }
}

/// Creates a session, uploads the fixture and trains round 0.
pub async fn trained_session(fx: &Fixture, app: &Router) -> String {
    let (status, v) = call(app, Method::POST, "/api/v1/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::CREATED);
    let sid = v["session_id"].as_str().unwrap().to_string();
    let (status, v) = call(app, Method::POST, &format!("/api/v1/sessions/{sid}/dataset"), Some(fx.upload_body())).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    let (status, v) = call(app, Method::POST, &format!("/api/v1/sessions/{sid}/train"), None).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{v}");
    let job = wait_job(app, &sid).await;
    assert_eq!(job["state"], "done", "{job}");
    sid
}

/// Oracle polygon for item `index` and `label`, as an annotation request body.
pub fn oracle_annotation(fx: &Fixture, index: usize, label: usize) -> Value {
    let a = refocus_core::synth::OracleAnnotator
        .annotate(&fx.data, index, label, 0)
        .unwrap()
        .expect("item carries the label's region");
    let mut v = serde_json::to_value(&a).unwrap();
    v["image_id"] = json!(fx.image_id(index));
    v
}

/// Indices of items positive for `label`.
pub fn positives(fx: &Fixture, label: usize) -> Vec<usize> {
    (0..fx.data.manifest.len())
        .filter(|&i| fx.data.manifest.items[i].has_label(label))
        .collect()
}
