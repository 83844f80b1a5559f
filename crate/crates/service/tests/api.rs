use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use noisenet_core::ingest::{event_to_json, event_to_value, save_dataset};
use noisenet_core::nn::save_checkpoint;
use noisenet_core::synth::generate_synthetic_dataset;
use noisenet_core::training::{train, TrainConfig};
use noisenet_service::{AppState, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn small_train() -> TrainConfig {
    TrainConfig {
        batch_size: 32,
        steps: 30,
        ..TrainConfig::default()
    }
}

/// Data dir with a trained initial model and a labeled base dataset.
fn setup(dir: &Path, threshold: f64) -> ServiceConfig {
    let base = generate_synthetic_dataset(20, 5, 0.25).unwrap();
    let base_path = dir.join("base.jsonl");
    save_dataset(&base_path, &base).unwrap();
    let out = train(base.events(), None, &small_train()).unwrap();
    let model_path = dir.join("initial.bin");
    save_checkpoint(&out.network, None, &model_path).unwrap();
    ServiceConfig {
        data_dir: dir.join("data"),
        entropy_threshold: threshold,
        retrain_min_new_labels: 3,
        base_dataset: Some(base_path),
        initial_model: Some(model_path),
        train: small_train(),
        ..ServiceConfig::default()
    }
}

fn events(n: usize, seed: u64) -> Vec<Value> {
    generate_synthetic_dataset(n, seed, 0.6)
        .unwrap()
        .events()
        .iter()
        .map(|e| {
            let mut v = event_to_value(e);
            v["label"] = Value::Null;
            v
        })
        .collect()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, Body::from))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn error_code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

#[tokio::test]
async fn without_a_model_classification_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::open(ServiceConfig {
        data_dir: dir.path().to_path_buf(),
        ..ServiceConfig::default()
    })
    .unwrap();
    let app = state.router();
    let body = events(1, 1)[0].to_string();
    let (s, v) = call(&app, "POST", "/v1/events", Some(body.clone())).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(&v), "NoActiveModel");
    let (s, _) = call(&app, "POST", "/v1/classify", Some(body)).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, v) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["active_version"], Value::Null);
}

#[tokio::test]
async fn ingest_and_classify_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(setup(dir.path(), 0.45)).unwrap().router();
    let ev = events(1, 2).remove(0);

    let (s, v) = call(&app, "POST", "/v1/events", Some(ev.to_string())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let p = &v["prediction"]["probabilities"];
    let sum = p[0].as_f64().unwrap() + p[1].as_f64().unwrap();
    assert!((sum - 1.0).abs() < 1e-9);
    assert_eq!(v["prediction"]["model_version"], "v1");

    let (s, v) = call(&app, "POST", "/v1/events", Some(ev.to_string())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "DuplicateEventId");

    let mut bad = ev.clone();
    bad["event_id"] = json!("short-frame");
    bad["frames"][0].as_array_mut().unwrap().pop();
    let (s, v) = call(&app, "POST", "/v1/events", Some(bad.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "SchemaViolation");

    let (s, v) = call(&app, "POST", "/v1/events", Some("{not json".into())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(&v), "MalformedRecord");

    let other = events(1, 3).remove(1).to_string();
    let (s1, a) = call(&app, "POST", "/v1/classify", Some(other.clone())).await;
    let (s2, b) = call(&app, "POST", "/v1/classify", Some(other)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a.to_string(), b.to_string());
    let h = a["entropy"].as_f64().unwrap();
    assert!((0.0..=std::f64::consts::LN_2).contains(&h));

    let mut short = ev.clone();
    short["frames"] = json!([short["frames"][0]]);
    let (s, v) = call(&app, "POST", "/v1/classify", Some(short.to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(matches!(error_code(&v), "EventTooShort" | "SchemaViolation"), "{v}");

    let (_, health) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(health["events"], 1);
}

#[tokio::test]
async fn queue_matrix_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let app = AppState::open(setup(dir.path(), 0.0)).unwrap().router();

    let (s, v) = call(&app, "GET", "/v1/queue", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["entries"], json!([]));

    let mut queued = Vec::new();
    for ev in events(4, 9) {
        let (s, v) = call(&app, "POST", "/v1/events", Some(ev.to_string())).await;
        assert_eq!(s, StatusCode::OK);
        if v["triage"] == "queued_for_labeling" {
            queued.push(v["event_id"].as_str().unwrap().to_string());
        }
    }
    assert!(queued.len() >= 2, "only {} queued", queued.len());

    let (_, v) = call(&app, "GET", "/v1/queue?limit=100", None).await;
    let entropies: Vec<f64> = v["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["entropy"].as_f64().unwrap())
        .collect();
    assert_eq!(entropies.len(), queued.len());
    assert!(entropies.windows(2).all(|w| w[0] >= w[1]), "{entropies:?}");
    let (_, v) = call(&app, "GET", "/v1/queue?limit=1", None).await;
    assert_eq!(v["entries"].as_array().unwrap().len(), 1);

    let top = v["entries"][0]["event_id"].as_str().unwrap().to_string();
    let (s, m) = call(&app, "GET", &format!("/v1/events/{top}/matrix"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(m["matrix"].as_array().unwrap().len(), 37);
    assert_eq!(m["matrix"][0].as_array().unwrap().len(), 37);
    assert_eq!(m["raw_frames"][0].as_array().unwrap().len(), 37);
    let (s, _) = call(&app, "GET", "/v1/events/nope/matrix", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let body = json!({ "class": "community", "labeler": "ana" }).to_string();
    let uri = format!("/v1/queue/{top}/label");
    let (s, v) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["pending"], queued.len() - 1);
    assert_eq!(v["record"]["class"], "community");
    let (s, v) = call(&app, "POST", &uri, Some(body.clone())).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(error_code(&v), "AlreadyLabeled");
    let (s, _) = call(&app, "POST", "/v1/queue/nope/label", Some(body)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &uri, Some(json!({ "class": "bird" }).to_string())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn retrain_register_and_activate() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), 0.0);
    let app = AppState::open(config.clone()).unwrap().router();
    let mut queued = Vec::new();
    for ev in events(3, 17) {
        let (_, v) = call(&app, "POST", "/v1/events", Some(ev.to_string())).await;
        if v["triage"] == "queued_for_labeling" {
            queued.push(v["event_id"].as_str().unwrap().to_string());
        }
    }
    assert!(queued.len() >= 2);
    let label = |id: &str| {
        let class = if id.starts_with("air") { "aircraft" } else { "community" };
        (format!("/v1/queue/{id}/label"), json!({ "class": class, "labeler": "ana" }).to_string())
    };
    let (uri, body) = label(&queued[0]);
    call(&app, "POST", &uri, Some(body)).await;

    let (s, v) = call(&app, "POST", "/v1/models/retrain", Some("{}".into())).await;
    assert_eq!(s, StatusCode::PRECONDITION_FAILED);
    assert_eq!(error_code(&v), "NotEnoughNewLabels");
    let (_, v) = call(&app, "GET", "/v1/models", None).await;
    assert_eq!(v["new_labels"], 1);
    assert_eq!(v["retrain_min_new_labels"], 3);

    let (s, v) = call(&app, "POST", "/v1/models/retrain", Some(json!({ "force": true }).to_string())).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{v}");
    assert_eq!(v["version"], "v2");
    assert_eq!(v["training_events"], 41);

    let mut registered = false;
    for _ in 0..600 {
        let (_, v) = call(&app, "GET", "/v1/models", None).await;
        assert!(!v["jobs"].to_string().contains("failed"), "{v}");
        if v["versions"].as_array().unwrap().len() == 2 {
            registered = true;
            assert_eq!(v["active_version"], "v1");
            assert_eq!(v["new_labels"], 0);
            break;
        }
        tokio::time::sleep(Duration::from_millis(100)).await;
    }
    assert!(registered, "retrain did not finish");
    assert!(config.data_dir.join("models/v2/checkpoint.bin").exists());
    assert!(config.data_dir.join("models/v2/report.json").exists());

    let (s, _) = call(&app, "POST", "/v1/models/v9/activate", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = call(&app, "POST", "/v1/models/v2/activate", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["active_version"], "v2");
    let ev = event_to_json(&generate_synthetic_dataset(1, 99, 0.2).unwrap().events()[0]);
    let (_, v) = call(&app, "POST", "/v1/classify", Some(ev)).await;
    assert_eq!(v["model_version"], "v2");

    drop(app);
    let reopened = AppState::open(config).unwrap();
    assert_eq!(reopened.active_model().unwrap().version, "v2");
    let app = reopened.router();
    let (_, h) = call(&app, "GET", "/v1/health", None).await;
    assert_eq!(h["events"], 6);
    assert_eq!(h["labels"], 1);
    assert_eq!(h["pending"], queued.len() - 1);
}
