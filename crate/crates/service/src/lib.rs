//! HTTP feedback service: live retrieval sessions driven by human (or, in
//! demo mode, oracle) relevance labels.
//!
//! Requests for one session are serialized by a per-session mutex; different
//! sessions run concurrently on the blocking pool.

pub mod api;
mod error;
pub mod journal;
mod live;

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use rareseek_core::dataset::{self, EmbeddedDataset};
use rareseek_core::metrics::{self, CoverageConfig, Evaluator};
use rareseek_core::session::SessionConfig;
use rareseek_core::{ClassId, SampleId};

use api::*;
pub use error::{ApiError, ErrorBody};
use journal::{Event, Journal};
pub use live::LiveSession;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Accept `{"auto": true}` label submissions answered by the oracle.
    pub demo: bool,
    /// Directory for per-session event logs; sessions found there are
    /// replayed on startup.
    pub journal_dir: Option<PathBuf>,
    pub coverage: CoverageConfig,
    /// Defaults for fields a create request leaves out.
    pub session: SessionConfig,
}

type SessionSlot = Arc<Mutex<LiveSession>>;

pub struct AppState {
    config: ServiceConfig,
    datasets: BTreeMap<String, Arc<EmbeddedDataset>>,
    sessions: RwLock<HashMap<String, SessionSlot>>,
    evaluators: Mutex<HashMap<(String, ClassId), Arc<Evaluator>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: ServiceConfig, datasets: Vec<EmbeddedDataset>) -> rareseek_core::Result<Self> {
        let mut map = BTreeMap::new();
        for ds in datasets {
            let name = ds.name().to_owned();
            if map.insert(name.clone(), Arc::new(ds)).is_some() {
                return Err(rareseek_core::Error::Config(format!("dataset {name:?} configured twice")));
            }
        }
        config.coverage.validate()?;
        config.session.validate()?;
        Ok(AppState {
            config,
            datasets: map,
            sessions: RwLock::new(HashMap::new()),
            evaluators: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    /// Loads every manifest (normalizing rows) and replays journaled sessions.
    pub fn load(config: ServiceConfig, manifests: &[PathBuf]) -> rareseek_core::Result<Self> {
        let datasets = manifests
            .iter()
            .map(|p| dataset::load_dataset(p, true))
            .collect::<rareseek_core::Result<Vec<_>>>()?;
        let state = AppState::new(config, datasets)?;
        state.recover()?;
        Ok(state)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.config
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    fn dataset(&self, name: &str) -> Result<Arc<EmbeddedDataset>, ApiError> {
        self.datasets
            .get(name)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_dataset", format!("no dataset named {name:?}")))
    }

    fn session(&self, id: &str) -> Result<SessionSlot, ApiError> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found("unknown_session", format!("no session {id:?}")))
    }

    fn evaluator(&self, ds: &EmbeddedDataset, class: ClassId) -> rareseek_core::Result<Arc<Evaluator>> {
        let key = (ds.name().to_owned(), class);
        if let Some(e) = self.evaluators.lock().expect("evaluator cache poisoned").get(&key) {
            return Ok(e.clone());
        }
        // built outside the lock; a racing duplicate build is harmless
        let built = Arc::new(Evaluator::new(metrics::build_class_clusters(
            ds,
            class,
            &self.config.coverage,
        )?));
        Ok(self
            .evaluators
            .lock()
            .expect("evaluator cache poisoned")
            .entry(key)
            .or_insert(built)
            .clone())
    }

    fn session_config(&self, req: &CreateSessionRequest) -> Result<SessionConfig, ApiError> {
        let mut config = req.config.clone().unwrap_or_else(|| self.config.session.clone());
        if let Some(s) = req.strategy {
            config.strategy = s;
        }
        config.validate()?;
        Ok(config)
    }

    fn build_session(&self, id: String, req: &CreateSessionRequest) -> Result<LiveSession, ApiError> {
        let ds = self.dataset(&req.dataset)?;
        live::validate_query(&ds, req)?;
        let config = self.session_config(req)?;
        let evaluator = self.evaluator(&ds, live::target_class(&ds, req))?;
        LiveSession::start(id, ds, req, config, evaluator)
    }

    /// Blocking. Starts a session and registers it under a fresh id.
    pub fn create_session(&self, req: &CreateSessionRequest) -> Result<CreateSessionResponse, ApiError> {
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let mut live = self.build_session(id.clone(), req)?;
        if let Some(dir) = &self.config.journal_dir {
            let mut j = Journal::create(dir, &id)
                .map_err(|e| ApiError::internal(format!("journal create failed: {e}")))?;
            j.append(&Event::Created { request: req.clone() })
                .map_err(|e| ApiError::internal(format!("journal write failed: {e}")))?;
            live.attach_journal(j);
        }
        let response = CreateSessionResponse {
            session: live.handle(),
            batch: live.batch().expect("a new session awaits labels"),
        };
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, Arc::new(Mutex::new(live)));
        Ok(response)
    }

    /// Blocking: the outstanding batch, proposing it first if needed.
    pub fn batch(&self, id: &str) -> Result<BatchView, ApiError> {
        let slot = self.session(id)?;
        let mut live = slot.lock().expect("session poisoned");
        live.advance()?;
        live.batch()
            .ok_or_else(|| ApiError::conflict(format!("session {id} is finished")))
    }

    pub fn submit(&self, id: &str, sub: &LabelSubmission) -> Result<LabelResponse, ApiError> {
        let slot = self.session(id)?;
        let mut live = slot.lock().expect("session poisoned");
        live.submit(sub, self.config.demo)
    }

    pub fn state(&self, id: &str) -> Result<StateView, ApiError> {
        let slot = self.session(id)?;
        let live = slot.lock().expect("session poisoned");
        Ok(live.view())
    }

    /// Labeled ids of a session; used to check isolation.
    pub fn labeled_ids(&self, id: &str) -> Result<Vec<SampleId>, ApiError> {
        let slot = self.session(id)?;
        let live = slot.lock().expect("session poisoned");
        Ok(live.labeled_ids())
    }

    pub fn dataset_infos(&self) -> Vec<DatasetInfo> {
        self.datasets
            .values()
            .map(|ds| DatasetInfo {
                name: ds.name().to_owned(),
                dim: ds.dim(),
                num_samples: ds.num_samples(),
                num_classes: ds.num_classes(),
                pool_size: ds.pool().len(),
                test_size: ds.test().len(),
                class_names: ds.manifest().class_names.clone(),
                has_images: ds.manifest().image_paths.is_some(),
            })
            .collect()
    }

    fn image_path(&self, name: &str, sample: &str) -> Result<PathBuf, ApiError> {
        let ds = self.dataset(name)?;
        let id: SampleId = sample
            .parse()
            .ok()
            .filter(|&id: &SampleId| (id as usize) < ds.num_samples())
            .ok_or_else(|| ApiError::not_found("unknown_sample", format!("no sample {sample:?}")))?;
        ds.image_path(id)
            .map(Path::to_path_buf)
            .ok_or_else(|| ApiError::not_found("no_image", format!("sample {id} has no image")))
    }

    /// Replays every journal in `journal_dir`. Sessions are deterministic, so
    /// re-running the recorded labels rebuilds the exact state.
    pub fn recover(&self) -> rareseek_core::Result<usize> {
        let Some(dir) = &self.config.journal_dir else {
            return Ok(0);
        };
        let logs = journal::read_all(dir).map_err(|e| rareseek_core::Error::io(dir, e))?;
        let mut recovered = 0;
        let mut max_id = 0;
        for (id, events) in logs {
            if let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) {
                max_id = max_id.max(n);
            }
            match self.replay(&id, &events) {
                Ok(mut live) => {
                    let j = Journal::create(dir, &id).map_err(|e| rareseek_core::Error::io(dir, e))?;
                    live.attach_journal(j);
                    self.sessions
                        .write()
                        .expect("session map poisoned")
                        .insert(id, Arc::new(Mutex::new(live)));
                    recovered += 1;
                }
                Err(e) => tracing::warn!(session = %id, error = %e, "cannot replay session"),
            }
        }
        self.next_id.fetch_max(max_id + 1, Ordering::Relaxed);
        tracing::info!(recovered, "journal replay done");
        Ok(recovered)
    }

    fn replay(&self, id: &str, events: &[Event]) -> Result<LiveSession, ApiError> {
        let Some(Event::Created { request }) = events.first() else {
            return Err(ApiError::internal("journal does not start with a create event"));
        };
        let mut live = self.build_session(id.to_owned(), request)?;
        for e in &events[1..] {
            match e {
                Event::Labeled { labels } => live.apply(labels)?,
                Event::Created { .. } => {
                    return Err(ApiError::internal("duplicate create event"));
                }
            }
        }
        Ok(live)
    }
}

async fn blocking<T, F>(state: Arc<AppState>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&AppState) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&state))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError::unprocessable("invalid_body", e.body_text()))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    payload: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let req = body(payload)?;
    let resp = blocking(state, move |s| s.create_session(&req)).await?;
    tracing::info!(session = %resp.session.session_id, dataset = %resp.session.dataset, "session created");
    Ok((StatusCode::CREATED, Json(resp)))
}

async fn get_batch(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<BatchView>, ApiError> {
    blocking(state, move |s| s.batch(&id)).await.map(Json)
}

async fn post_labels(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    payload: Result<Json<LabelSubmission>, JsonRejection>,
) -> Result<Json<LabelResponse>, ApiError> {
    state.session(&id)?;
    let sub = body(payload)?;
    blocking(state, move |s| s.submit(&id, &sub)).await.map(Json)
}

async fn get_state(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<StateView>, ApiError> {
    blocking(state, move |s| s.state(&id)).await.map(Json)
}

async fn list_datasets(State(state): State<Arc<AppState>>) -> Json<Vec<DatasetInfo>> {
    Json(state.dataset_infos())
}

async fn sample_image(
    State(state): State<Arc<AppState>>,
    UrlPath((name, sample)): UrlPath<(String, String)>,
) -> Result<impl IntoResponse, ApiError> {
    let path = state.image_path(&name, &sample)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|_| ApiError::not_found("no_image", format!("image {} unreadable", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes))
}

async fn fallback() -> ApiError {
    ApiError::not_found("not_found", "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/batch", get(get_batch))
        .route("/v1/sessions/{id}/labels", post(post_labels))
        .route("/v1/sessions/{id}/state", get(get_state))
        .route("/v1/datasets", get(list_datasets))
        .route("/v1/datasets/{name}/samples/{id}/image", get(sample_image))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, demo = state.config.demo, "listening");
    axum::serve(listener, router(Arc::new(state)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
