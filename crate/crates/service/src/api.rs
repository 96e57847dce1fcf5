//! HTTP routes.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use caplens_core::adapter::ModelAdapter;
use caplens_core::corpus::{GraphDocument, ScoreHistogram};
use caplens_core::pipeline::{run_ingest_tracked, DatasetView, IngestJob, IngestOptions};
use caplens_core::store::ArtifactStore;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use crate::error::ApiError;
use crate::ops::{
    self, ColorBy, DatasetSummary, Portions, SegmentPoint, SegmentView, SteerBatchBody, SteerBatchResponse, SteerBody,
    SteerResponse,
};

type ApiResult<T> = Result<Json<T>, ApiError>;

pub struct AppState {
    pub store: Arc<ArtifactStore>,
    pub adapter: Arc<dyn ModelAdapter>,
    jobs: Mutex<HashMap<String, Arc<Mutex<IngestJob>>>>,
    active: Arc<Mutex<HashSet<String>>>,
    next_job: AtomicU64,
    steer_permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(store: Arc<ArtifactStore>, adapter: Arc<dyn ModelAdapter>) -> Arc<Self> {
        let permits = adapter.max_concurrency().max(1);
        Arc::new(Self {
            store,
            adapter,
            jobs: Mutex::new(HashMap::new()),
            active: Arc::new(Mutex::new(HashSet::new())),
            next_job: AtomicU64::new(1),
            steer_permits: Arc::new(Semaphore::new(permits)),
        })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/datasets", get(datasets))
        .route("/datasets/{id}/graph", get(graph))
        .route("/datasets/{id}/graph/portions", get(portions))
        .route("/datasets/{id}/itm-histogram", get(histogram))
        .route("/datasets/{id}/segments", get(segments))
        .route("/datasets/{id}/ingest", post(ingest))
        .route("/segments/{sid}", get(segment))
        .route("/jobs/{id}", get(job))
        .route("/steer", post(steer))
        .route("/steer/batch", post(steer_batch))
        .with_state(state)
}

/// Run blocking store or model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError {
        status: StatusCode::INTERNAL_SERVER_ERROR,
        message: format!("worker failed: {e}"),
    })?
}

async fn datasets(State(s): State<Arc<AppState>>) -> ApiResult<Vec<DatasetSummary>> {
    let store = s.store.clone();
    blocking(move || Ok(ops::list_datasets(&store)?)).await.map(Json)
}

#[derive(Deserialize)]
struct GraphQuery {
    min_node: Option<u64>,
    min_edge: Option<u64>,
}

async fn graph(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<GraphQuery>,
) -> ApiResult<GraphDocument> {
    let store = s.store.clone();
    blocking(move || {
        let view = DatasetView::open(&store, &id)?;
        Ok(ops::graph(&view, q.min_node.unwrap_or(0), q.min_edge.unwrap_or(0))?)
    })
    .await
    .map(Json)
}

#[derive(Deserialize)]
struct HistogramQuery {
    bins: Option<usize>,
}

async fn histogram(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<HistogramQuery>,
) -> ApiResult<ScoreHistogram> {
    let store = s.store.clone();
    blocking(move || Ok(DatasetView::open(&store, &id)?.histogram(q.bins)?))
        .await
        .map(Json)
}

#[derive(Deserialize)]
struct PortionQuery {
    lo: Option<f64>,
    hi: Option<f64>,
}

async fn portions(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<PortionQuery>,
) -> ApiResult<Portions> {
    let store = s.store.clone();
    blocking(move || {
        let view = DatasetView::open(&store, &id)?;
        Ok(ops::portions(&view, q.lo.unwrap_or(0.0), q.hi.unwrap_or(1.0))?)
    })
    .await
    .map(Json)
}

#[derive(Deserialize)]
struct SegmentsQuery {
    color: Option<String>,
    word: Option<String>,
}

async fn segments(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<SegmentsQuery>,
) -> ApiResult<Vec<SegmentPoint>> {
    let store = s.store.clone();
    blocking(move || {
        let color: ColorBy = q.color.as_deref().map(str::parse).transpose()?.unwrap_or_default();
        let view = DatasetView::open(&store, &id)?;
        Ok(ops::segments(&view, color, q.word.as_deref())?)
    })
    .await
    .map(Json)
}

#[derive(Deserialize)]
struct WordQuery {
    word: Option<String>,
}

async fn segment(
    State(s): State<Arc<AppState>>,
    Path(sid): Path<String>,
    Query(q): Query<WordQuery>,
) -> ApiResult<SegmentView> {
    let store = s.store.clone();
    blocking(move || Ok(ops::segment_view(&store, &sid, q.word.as_deref())?))
        .await
        .map(Json)
}

async fn ingest(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> Result<(StatusCode, Json<Value>), ApiError> {
    {
        let store = s.store.clone();
        let id = id.clone();
        blocking(move || Ok(DatasetView::open(&store, &id).map(|_| ())?)).await?;
    }
    if !s.active.lock().expect("active lock").insert(id.clone()) {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            message: format!("an ingest job for dataset {id} is already running"),
        });
    }
    let job_id = format!("{id}-{}", s.next_job.fetch_add(1, Ordering::SeqCst));
    let job = Arc::new(Mutex::new(IngestJob::new(job_id.clone(), id.clone())));
    s.jobs.lock().expect("jobs lock").insert(job_id.clone(), job.clone());
    let (store, adapter, active) = (s.store.clone(), s.adapter.clone(), s.active.clone());
    tokio::task::spawn_blocking(move || {
        if let Err(e) = run_ingest_tracked(&store, adapter.as_ref(), &id, &IngestOptions::default(), &job) {
            log::error!("ingest of {id} failed: {e}");
        }
        active.lock().expect("active lock").remove(&id);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn job(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<IngestJob> {
    let job = s
        .jobs
        .lock()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .ok_or_else(|| ApiError {
            status: StatusCode::NOT_FOUND,
            message: format!("not found: job {id}"),
        })?;
    let snapshot = job.lock().expect("job lock").clone();
    Ok(Json(snapshot))
}

async fn steer(State(s): State<Arc<AppState>>, Json(body): Json<SteerBody>) -> ApiResult<SteerResponse> {
    let _permit = s.steer_permits.clone().acquire_owned().await.expect("semaphore closed");
    let (store, adapter) = (s.store.clone(), s.adapter.clone());
    blocking(move || ops::steer(&store, adapter.as_ref(), &body).map_err(ApiError::steering))
        .await
        .map(Json)
}

async fn steer_batch(
    State(s): State<Arc<AppState>>,
    Json(body): Json<SteerBatchBody>,
) -> ApiResult<SteerBatchResponse> {
    let _permit = s.steer_permits.clone().acquire_owned().await.expect("semaphore closed");
    let (store, adapter) = (s.store.clone(), s.adapter.clone());
    blocking(move || ops::steer_batch(&store, adapter.as_ref(), &body).map_err(ApiError::steering))
        .await
        .map(Json)
}
