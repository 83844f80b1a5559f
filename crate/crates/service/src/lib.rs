//! HTTP service for event classification, the labeling queue and the
//! model registry.
//!
//! All state lives under `data_dir` (see [`store`] and [`registry`]).
//! Store mutations go through one mutex, the active model is an
//! `Arc` swapped under a read-write lock, and retraining runs on its own
//! thread.

mod config;
mod error;
pub mod registry;
pub mod store;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use noisenet_core::active::{next_version, predict_event, retrain, QueueEntry, TriagePolicy};
use noisenet_core::event::{band_centers, duration_seconds, NoiseClass, NoiseEvent, Prediction, SpectralFrame};
use noisenet_core::ingest::{parse_event, Dataset};
use noisenet_core::nn::{load_checkpoint, Network};
use noisenet_core::preprocess::{interpolate_event, normalize};
use noisenet_core::training::{evaluate, TrainConfig};
use noisenet_core::Error;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::TcpListener;

pub use config::ServiceConfig;
pub use error::ServiceError;
use registry::{ModelInfo, Registry};
use store::EventStore;

type ApiResult<T> = Result<T, ServiceError>;

#[derive(Debug)]
pub struct LoadedModel {
    pub version: String,
    pub network: Network,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Job {
    Training { labels_used: usize },
    Failed { labels_used: usize, error: String },
}

#[derive(Debug)]
struct Inner {
    config: ServiceConfig,
    policy: TriagePolicy,
    base: Dataset,
    jobs: Mutex<BTreeMap<String, Job>>,
    registry: Mutex<Registry>,
    store: Mutex<EventStore>,
    active: RwLock<Option<Arc<LoadedModel>>>,
}

/// Shared service state. Cloning is cheap.
#[derive(Debug, Clone)]
pub struct AppState(Arc<Inner>);

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl AppState {
    /// Replays the logs under `config.data_dir` and loads the active model.
    /// With an empty registry and `initial_model` set, that checkpoint is
    /// registered as the first version and activated.
    pub fn open(config: ServiceConfig) -> ApiResult<Self> {
        config.validate()?;
        let store = EventStore::open(&config.data_dir, config.queue_capacity)?;
        let mut registry = Registry::open(&config.data_dir.join("models"))?;
        let base = match &config.base_dataset {
            Some(p) => noisenet_core::ingest::load_dataset(p)?,
            None => Dataset::default(),
        };
        if registry.versions().is_empty() {
            if let Some(path) = &config.initial_model {
                let (mut network, adam) = load_checkpoint(path)?;
                let version = next_version([]);
                network.set_version(&version);
                let info = ModelInfo {
                    version: version.clone(),
                    created_at: Utc::now(),
                    labels_used: 0,
                    summary: json!({ "source": path.display().to_string() }),
                };
                registry.register(&network, adam.as_ref(), info)?;
                registry.activate(&version, Utc::now())?;
            }
        }
        let active = match registry.active() {
            Some(v) => Some(Arc::new(load_version(&registry, v)?)),
            None => None,
        };
        Ok(Self(Arc::new(Inner {
            policy: config.policy(),
            config,
            base,
            jobs: Mutex::new(BTreeMap::new()),
            registry: Mutex::new(registry),
            store: Mutex::new(store),
            active: RwLock::new(active),
        })))
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }

    pub fn active_model(&self) -> Option<Arc<LoadedModel>> {
        self.0.active.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn require_model(&self) -> ApiResult<Arc<LoadedModel>> {
        self.active_model().ok_or(ServiceError::NoActiveModel)
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/v1/events", post(post_event))
            .route("/v1/classify", post(classify))
            .route("/v1/queue", get(queue))
            .route("/v1/events/:id/matrix", get(matrix))
            .route("/v1/queue/:id/label", post(label))
            .route("/v1/models", get(models))
            .route("/v1/models/retrain", post(start_retrain))
            .route("/v1/models/:version/activate", post(activate))
            .route("/v1/health", get(health))
            .with_state(self.clone())
    }

    /// Labels added since the newest registered or in-flight training
    /// snapshot.
    fn new_labels(&self, registry: &Registry, jobs: &BTreeMap<String, Job>, total: usize) -> usize {
        let in_flight = jobs
            .values()
            .filter_map(|j| match j {
                Job::Training { labels_used } => Some(*labels_used),
                Job::Failed { .. } => None,
            })
            .max()
            .unwrap_or(0);
        total.saturating_sub(registry.labels_used().max(in_flight))
    }

    /// Reserves a version and trains it on a background thread. Returns the
    /// reserved version, the number of new labels and the training-set size.
    pub fn begin_retrain(&self, force: bool) -> ApiResult<(String, usize, usize)> {
        let inner = &self.0;
        let mut jobs = lock(&inner.jobs);
        let registry = lock(&inner.registry);
        let (labeled, total) = {
            let store = lock(&inner.store);
            (store.manually_labeled(), store.labels().len())
        };
        let new_labels = self.new_labels(&registry, &jobs, total);
        if !force && new_labels < inner.policy.retrain_min_new_labels {
            return Err(Error::NotEnoughNewLabels {
                available: new_labels,
                required: inner.policy.retrain_min_new_labels,
            }
            .into());
        }
        let version = next_version(
            registry
                .versions()
                .iter()
                .map(|v| v.version.as_str())
                .chain(jobs.keys().map(String::as_str)),
        );
        drop(registry);
        let training_events = noisenet_core::active::merge_labeled(&inner.base, &labeled)?.len();
        jobs.insert(version.clone(), Job::Training { labels_used: total });
        drop(jobs);
        let state = self.clone();
        let v = version.clone();
        std::thread::spawn(move || state.run_retrain(v, labeled, new_labels, total, force));
        Ok((version, new_labels, training_events))
    }

    fn run_retrain(&self, version: String, labeled: Vec<NoiseEvent>, new_labels: usize, labels_used: usize, force: bool) {
        let inner = &self.0;
        let config: &TrainConfig = &inner.config.train;
        let result = retrain(&inner.base, &labeled, new_labels, &inner.policy, config, force, &version).and_then(|out| {
            let train_accuracy = if labeled.is_empty() {
                None
            } else {
                Some(evaluate(&out.network, &labeled)?.accuracy)
            };
            let info = ModelInfo {
                version: version.clone(),
                created_at: Utc::now(),
                labels_used,
                summary: json!({
                    "new_labels": new_labels,
                    "base_events": inner.base.len(),
                    "labeled_events": labeled.len(),
                    "labeled_accuracy": train_accuracy,
                    "final_history": out.history.last(),
                    "train": config,
                }),
            };
            lock(&inner.registry).register(&out.network, Some(&out.adam), info)
        });
        let mut jobs = lock(&inner.jobs);
        match result {
            Ok(()) => {
                jobs.remove(&version);
                tracing::info!(%version, "retrained model registered");
            }
            Err(e) => {
                tracing::error!(%version, "retrain failed: {e}");
                jobs.insert(version, Job::Failed { labels_used, error: e.to_string() });
            }
        }
    }

    /// Loads a registered version and makes it the active model.
    pub fn activate(&self, version: &str) -> ApiResult<()> {
        let inner = &self.0;
        if matches!(lock(&inner.jobs).get(version), Some(Job::Training { .. })) {
            return Err(ServiceError::VersionNotReady(version.to_string()));
        }
        let mut registry = lock(&inner.registry);
        if registry.get(version).is_none() {
            return Err(ServiceError::UnknownVersion(version.to_string()));
        }
        let model = Arc::new(load_version(&registry, version)?);
        registry.activate(version, Utc::now())?;
        *inner.active.write().unwrap_or_else(|p| p.into_inner()) = Some(model);
        Ok(())
    }

    fn models_listing(&self) -> Value {
        let inner = &self.0;
        let jobs = lock(&inner.jobs);
        let registry = lock(&inner.registry);
        let total = lock(&inner.store).labels().len();
        let new_labels = self.new_labels(&registry, &jobs, total);
        let active = registry.active();
        let versions: Vec<Value> = registry
            .versions()
            .iter()
            .map(|v| {
                json!({
                    "version": v.version,
                    "created_at": v.created_at,
                    "labels_used": v.labels_used,
                    "summary": v.summary,
                    "active": Some(v.version.as_str()) == active,
                })
            })
            .collect();
        json!({
            "active_version": active,
            "versions": versions,
            "jobs": jobs.iter().map(|(v, j)| json!({ "version": v, "job": j })).collect::<Vec<_>>(),
            "new_labels": new_labels,
            "retrain_min_new_labels": inner.policy.retrain_min_new_labels,
        })
    }
}

fn load_version(registry: &Registry, version: &str) -> ApiResult<LoadedModel> {
    let (mut network, _) = load_checkpoint(&registry.checkpoint_path(version))?;
    network.set_version(version);
    Ok(LoadedModel {
        version: version.to_string(),
        network,
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn parse_body(body: &Bytes) -> ApiResult<NoiseEvent> {
    let text = std::str::from_utf8(body).map_err(|e| Error::MalformedRecord {
        line: 1,
        message: e.to_string(),
    })?;
    Ok(parse_event(text, 1)?)
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

#[derive(Debug, Serialize)]
struct IngestResponse {
    event_id: String,
    prediction: Prediction,
    triage: noisenet_core::event::Triage,
    queue_entry: Option<QueueEntry>,
}

async fn post_event(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<IngestResponse>> {
    blocking(move || {
        let event = parse_body(&body)?;
        let model = state.require_model()?;
        if lock(&state.0.store).contains(&event.event_id) {
            return Err(Error::DuplicateEventId {
                event_id: event.event_id,
                line: 1,
            }
            .into());
        }
        let prediction = predict_event(&model.network, &event, &state.0.policy)?;
        let event_id = event.event_id.clone();
        let entry = lock(&state.0.store).ingest(event, prediction.clone(), state.0.policy.entropy_threshold, Utc::now())?;
        Ok(Json(IngestResponse {
            event_id,
            triage: prediction.triage,
            prediction,
            queue_entry: entry,
        }))
    })
    .await
}

async fn classify(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Prediction>> {
    blocking(move || {
        let event = parse_body(&body)?;
        let model = state.require_model()?;
        Ok(Json(predict_event(&model.network, &event, &state.0.policy)?))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(State(state): State<AppState>, Query(params): Query<QueueParams>) -> Json<Value> {
    let store = lock(&state.0.store);
    let entries = store.pending(params.limit.unwrap_or(50));
    Json(json!({ "pending": store.pending_count(), "entries": entries }))
}

async fn matrix(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let (event, prediction) = {
        let store = lock(&state.0.store);
        let (e, p) = store
            .get(&id)
            .ok_or_else(|| Error::UnknownEvent(id.clone()))?;
        (e.clone(), p.clone())
    };
    let width = state
        .active_model()
        .map_or(noisenet_core::event::DEFAULT_WIDTH, |m| m.network.config().input_cols);
    let raw = interpolate_event(&event, width)?;
    let normalized = normalize(&raw)?;
    let rows = |m: &noisenet_core::preprocess::LevelMatrix| -> Vec<Vec<f64>> {
        (0..m.rows).map(|r| m.row(r).to_vec()).collect()
    };
    let frames: Vec<Vec<f64>> = event.frames().iter().map(SpectralFrame::to_channels).collect();
    Ok(Json(json!({
        "event_id": event.event_id,
        "rows": raw.rows,
        "width": width,
        "band_centers_hz": band_centers().to_vec(),
        "duration_seconds": duration_seconds(&event),
        "matrix": rows(&normalized),
        "raw_matrix": rows(&raw),
        "raw_frames": frames,
        "label": event.label,
        "prediction": prediction,
    })))
}

#[derive(Debug, Deserialize)]
struct LabelRequest {
    class: NoiseClass,
    labeler: String,
}

async fn label(State(state): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: LabelRequest = parse_json(&body)?;
    if req.labeler.trim().is_empty() {
        return Err(ServiceError::BadRequest("labeler must not be empty".into()));
    }
    blocking(move || {
        let mut store = lock(&state.0.store);
        let record = store.label(&id, req.class, &req.labeler, Utc::now())?;
        Ok(Json(json!({ "record": record, "pending": store.pending_count() })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct RetrainRequest {
    #[serde(default)]
    force: bool,
}

async fn start_retrain(State(state): State<AppState>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: RetrainRequest = if body.iter().all(u8::is_ascii_whitespace) {
        RetrainRequest::default()
    } else {
        parse_json(&body)?
    };
    let (version, new_labels, training_events) = blocking(move || state.begin_retrain(req.force)).await?;
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({
            "version": version,
            "status": "training",
            "new_labels": new_labels,
            "training_events": training_events,
        })),
    ))
}

async fn activate(State(state): State<AppState>, UrlPath(version): UrlPath<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        state.activate(&version)?;
        Ok(Json(state.models_listing()))
    })
    .await
}

async fn models(State(state): State<AppState>) -> Json<Value> {
    Json(state.models_listing())
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    let store = lock(&state.0.store);
    Json(json!({
        "status": "ok",
        "active_version": state.active_model().map(|m| m.version.clone()),
        "events": store.len(),
        "pending": store.pending_count(),
        "labels": store.labels().len(),
    }))
}

/// A bound listener with its state, ready to serve.
pub struct Server {
    state: AppState,
    listener: TcpListener,
}

impl Server {
    pub async fn bind(config: ServiceConfig) -> ApiResult<Self> {
        let addr = config.listen_addr;
        let state = blocking(move || AppState::open(config)).await?;
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|e| ServiceError::Config(format!("bind {addr}: {e}")))?;
        Ok(Self { state, listener })
    }

    pub fn local_addr(&self) -> ApiResult<SocketAddr> {
        self.listener
            .local_addr()
            .map_err(|e| ServiceError::Internal(e.to_string()))
    }

    pub fn state(&self) -> &AppState {
        &self.state
    }

    /// Serves until ctrl-c.
    pub async fn run(self) -> ApiResult<()> {
        let app = self.state.router();
        axum::serve(self.listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| ServiceError::Internal(e.to_string()))
    }
}
