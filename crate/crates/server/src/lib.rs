//! HTTP service over the integration pipeline.
//!
//! One immutable snapshot is shared by every request. Previews run
//! synchronously on the blocking pool; runs are queued under a run id and
//! polled through `GET /run/{id}/report`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Body;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use medfuse_core::api::{
    CohortPreviewRequest, ErrorBody, LoadRequest, RunStarted, RunState, RunStatus, SnapshotSummary,
};
use medfuse_core::ingest::{load_snapshot_with, LoadOptions};
use medfuse_core::pipeline::{
    preview_cohort, preview_widths, run_pipeline, run_pipeline_with, CohortPreview, RunConfig, WidthsPreview,
    WidthsQuery,
};
use medfuse_core::{DatasetSnapshot, Error};

pub const ADDR_ENV: &str = "MEDFUSE_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8088";

/// Bind address from `MEDFUSE_ADDR`, else the default.
pub fn addr_from_env() -> Result<SocketAddr, String> {
    let raw = std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.to_string());
    raw.parse().map_err(|e| format!("{ADDR_ENV}={raw}: {e}"))
}

struct Loaded {
    snapshot: DatasetSnapshot,
    root: PathBuf,
    options: LoadOptions,
}

#[derive(Default)]
pub struct AppState {
    snapshot: RwLock<Option<Arc<Loaded>>>,
    runs: Mutex<HashMap<String, RunStatus>>,
    active_outputs: Mutex<HashMap<PathBuf, String>>,
    next_run: AtomicU64,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(AppState::default())
    }

    /// Loads a snapshot and makes it the one every request sees.
    pub fn load(&self, req: &LoadRequest) -> Result<SnapshotSummary, Error> {
        if !req.dataset_root.is_dir() {
            return Err(Error::config(
                "dataset_root",
                format!("{} is not a directory", req.dataset_root.display()),
            ));
        }
        let snapshot = load_snapshot_with(&req.dataset_root, &req.version_tag, &req.options)?;
        let summary = SnapshotSummary::of(&snapshot);
        let loaded = Loaded {
            snapshot,
            root: canonical(&req.dataset_root),
            options: req.options,
        };
        *self.snapshot.write().expect("snapshot lock") = Some(Arc::new(loaded));
        Ok(summary)
    }

    fn loaded(&self) -> Option<Arc<Loaded>> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn set_run(&self, status: RunStatus) {
        self.runs
            .lock()
            .expect("runs lock")
            .insert(status.run_id.clone(), status);
    }

    fn run(&self, id: &str) -> Option<RunStatus> {
        self.runs.lock().expect("runs lock").get(id).cloned()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/snapshot/load", post(load))
        .route("/cohort/preview", post(cohort_preview))
        .route("/align/preview", post(align_preview))
        .route("/run", post(start_run))
        .route("/run/{id}/report", get(run_report))
        .route("/run/{id}/artifact/{name}", get(artifact))
        .with_state(state)
}

/// Binds `addr` and serves until the listener fails.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    serve_listener(tokio::net::TcpListener::bind(addr).await?, state).await
}

pub async fn serve_listener(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                field: None,
                message: message.into(),
            },
        }
    }

    fn no_snapshot() -> Self {
        ApiError::new(
            StatusCode::CONFLICT,
            "no_snapshot",
            "load a snapshot with POST /snapshot/load first",
        )
    }

    fn not_found(what: impl Into<String>) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "not_found", what)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let message = e.to_string();
        let (status, kind, field) = match &e {
            Error::InvalidConfig { field, .. } => (StatusCode::BAD_REQUEST, "invalid_config", Some(field.clone())),
            Error::Unknown { kind, .. } => (StatusCode::BAD_REQUEST, "unknown_value", Some(kind.to_string())),
            Error::Json(_) => (StatusCode::BAD_REQUEST, "invalid_json", None),
            Error::Lexicon(_) => (StatusCode::BAD_REQUEST, "invalid_lexicon", Some("lexicon".into())),
            Error::Template(_) => (StatusCode::BAD_REQUEST, "invalid_template", Some("path_convention".into())),
            Error::Embedder(_) => (StatusCode::BAD_REQUEST, "embedder", Some("embeddings".into())),
            Error::Io { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "io", None),
            Error::MissingTable(_) | Error::MissingColumn { .. } | Error::TooManyRejects { .. } | Error::Csv { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "invalid_dataset", None)
            }
            Error::OverlappingAdmissions { .. } | Error::OutsideWindow { .. } => {
                (StatusCode::UNPROCESSABLE_ENTITY, "inconsistent_dataset", None)
            }
            Error::Stage { .. } => (StatusCode::INTERNAL_SERVER_ERROR, "stage_failed", None),
        };
        ApiError {
            status,
            body: ErrorBody {
                error: kind.into(),
                field,
                message,
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", r.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce() -> Result<T, Error> + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn load(
    State(state): State<Arc<AppState>>,
    body: Result<Json<LoadRequest>, JsonRejection>,
) -> ApiResult<SnapshotSummary> {
    let Json(req) = body?;
    Ok(Json(blocking(move || state.load(&req)).await?))
}

async fn cohort_preview(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CohortPreviewRequest>, JsonRejection>,
) -> ApiResult<CohortPreview> {
    let Json(req) = body?;
    req.cohort.validate()?;
    let loaded = state.loaded().ok_or_else(ApiError::no_snapshot)?;
    Ok(Json(blocking(move || preview_cohort(&loaded.snapshot, &req.cohort)).await?))
}

async fn align_preview(
    State(state): State<Arc<AppState>>,
    body: Result<Json<WidthsQuery>, JsonRejection>,
) -> ApiResult<WidthsPreview> {
    let Json(query) = body?;
    query.cohort.validate()?;
    let loaded = state.loaded().ok_or_else(ApiError::no_snapshot)?;
    Ok(Json(blocking(move || preview_widths(&loaded.snapshot, &query)).await?))
}

fn canonical(p: &Path) -> PathBuf {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf())
}

async fn start_run(
    State(state): State<Arc<AppState>>,
    body: Result<Json<RunConfig>, JsonRejection>,
) -> Result<(StatusCode, Json<RunStarted>), ApiError> {
    let Json(config) = body?;
    config.validate()?;
    let output = canonical_output(&config.output_dir);
    let run_id = format!("run-{}", state.next_run.fetch_add(1, Ordering::Relaxed) + 1);
    {
        let mut active = state.active_outputs.lock().expect("outputs lock");
        if let Some(other) = active.get(&output) {
            return Err(ApiError {
                status: StatusCode::CONFLICT,
                body: ErrorBody {
                    error: "output_busy".into(),
                    field: Some("output_dir".into()),
                    message: format!("{} is being written by {other}", config.output_dir.display()),
                },
            });
        }
        active.insert(output.clone(), run_id.clone());
    }
    state.set_run(RunStatus {
        run_id: run_id.clone(),
        state: RunState::Queued,
        failed_stage: None,
        error: None,
        report: None,
    });

    // Reuse the loaded snapshot when it matches the run's dataset.
    let shared = state.loaded().filter(|l| {
        l.root == canonical(&config.dataset_root)
            && l.snapshot.version_tag() == config.version_tag
            && l.options.max_reject_pct == config.max_reject_pct
    });
    let bg_state = state.clone();
    let id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        bg_state.set_run(RunStatus {
            run_id: id.clone(),
            state: RunState::Running,
            failed_stage: None,
            error: None,
            report: None,
        });
        let result = match &shared {
            Some(l) => run_pipeline_with(&l.snapshot, &config),
            None => run_pipeline(&config),
        };
        let status = match result {
            Ok(report) => RunStatus {
                run_id: id.clone(),
                state: RunState::Done,
                failed_stage: None,
                error: None,
                report: Some(report),
            },
            Err(e) => RunStatus {
                run_id: id.clone(),
                state: RunState::Failed,
                failed_stage: match &e {
                    Error::Stage { stage, .. } => Some(stage.to_string()),
                    _ => None,
                },
                error: Some(e.to_string()),
                report: None,
            },
        };
        bg_state.set_run(status);
        bg_state.active_outputs.lock().expect("outputs lock").remove(&output);
    });
    Ok((StatusCode::ACCEPTED, Json(RunStarted { run_id })))
}

/// The output directory may not exist yet; canonicalize its parent instead.
fn canonical_output(dir: &Path) -> PathBuf {
    match (dir.parent(), dir.file_name()) {
        (Some(parent), Some(name)) if !parent.as_os_str().is_empty() => canonical(parent).join(name),
        _ => canonical(dir),
    }
}

async fn run_report(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<RunStatus> {
    state
        .run(&id)
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("no run `{id}`")))
}

async fn artifact(
    State(state): State<Arc<AppState>>,
    UrlPath((id, name)): UrlPath<(String, String)>,
) -> Result<Response, ApiError> {
    let status = state
        .run(&id)
        .ok_or_else(|| ApiError::not_found(format!("no run `{id}`")))?;
    let Some(report) = status.report else {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "run_not_done",
            format!("run `{id}` is {:?}", status.state).to_lowercase(),
        ));
    };
    // Only names the report declares are served, so `name` cannot escape the output dir.
    let known = name == "report.json" || report.artifacts.iter().any(|a| a.name == name);
    if !known {
        return Err(ApiError::not_found(format!("run `{id}` has no artifact `{name}`")));
    }
    let path = report.config.output_dir.join(&name);
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::from(Error::io(&path, e)))?;
    let kind = if name.ends_with(".json") {
        "application/json"
    } else {
        "text/csv; charset=utf-8"
    };
    Ok(([(header::CONTENT_TYPE, kind)], Body::from(bytes)).into_response())
}
