//! HTTP/JSON service around the fusionnet pipeline.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | GET | `/health` | | [`Health`] |
//! | POST | `/v1/train` | [`TrainRequest`] | [`JobCreated`] (202) |
//! | GET | `/v1/jobs/{id}?since=N` | | [`JobStatus`] |
//! | POST | `/v1/predict` | [`PredictRequest`] | [`PredictResponse`] |
//! | POST | `/v1/evaluate` | [`EvaluateRequest`] | [`EvaluateResponse`] |
//! | POST | `/v1/augment` | [`AugmentRequest`] | [`AugmentResponse`] |
//! | POST | `/v1/gradcheck` | [`GradcheckRequest`] | [`GradcheckResponse`] |
//!
//! Training runs as a background job; the other operations answer when
//! done. All numeric work happens on the blocking thread pool. Errors come
//! back as [`ApiError`] bodies.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fusionnet_core::api::{
    ApiError, AugmentRequest, AugmentResponse, EvaluateRequest, EvaluateResponse, GradcheckRequest,
    GradcheckResponse, Health, JobCreated, JobState, JobStatus, PredictRequest, PredictResponse, TrainOutcome,
    TrainRequest,
};
use fusionnet_core::gradcheck::run_suite;
use fusionnet_core::pipeline::workflow::{augment_to_dir, evaluate_dir, predict_files, run_training, TrainEvent};
use fusionnet_core::pipeline::StepRecord;
use serde::Deserialize;
use tokio::net::TcpListener;
use tracing::{error, info};

/// An error reply.
#[derive(Debug)]
pub struct AppError {
    status: StatusCode,
    message: String,
}

impl AppError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        AppError {
            status,
            message: message.into(),
        }
    }
}

impl From<fusionnet_core::Error> for AppError {
    fn from(e: fusionnet_core::Error) -> Self {
        let status = match e {
            fusionnet_core::Error::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        AppError::new(status, e.to_string())
    }
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        (self.status, Json(ApiError { error: self.message })).into_response()
    }
}

type Reply<T> = Result<Json<T>, AppError>;

#[derive(Debug)]
struct Job {
    state: JobState,
    phase: String,
    total_steps: u64,
    records: Vec<StepRecord>,
    outcome: Option<TrainOutcome>,
    error: Option<String>,
}

/// Shared service state: the table of training jobs.
#[derive(Debug, Default)]
pub struct AppState {
    jobs: Mutex<HashMap<u64, Job>>,
    next_job: AtomicU64,
}

impl AppState {
    fn update(&self, id: u64, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().expect("job table").get_mut(&id) {
            f(job);
        }
    }
}

/// Runs a blocking closure on the blocking pool.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> fusionnet_core::Result<T> + Send + 'static,
) -> Result<T, AppError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
        .map_err(AppError::from)
}

async fn health() -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        version: env!("CARGO_PKG_VERSION").into(),
    })
}

async fn start_training(
    State(state): State<Arc<AppState>>,
    Json(req): Json<TrainRequest>,
) -> Result<(StatusCode, Json<JobCreated>), AppError> {
    req.config.validate()?;
    let id = state.next_job.fetch_add(1, Ordering::Relaxed) + 1;
    state.jobs.lock().expect("job table").insert(
        id,
        Job {
            state: JobState::Running,
            phase: "loading".into(),
            total_steps: 0,
            records: Vec::new(),
            outcome: None,
            error: None,
        },
    );
    info!(job = id, data = %req.data.display(), "training job started");
    let worker = Arc::clone(&state);
    tokio::task::spawn_blocking(move || {
        let result = run_training(&req, |event| {
            worker.update(id, |job| match event {
                TrainEvent::Phase { name, total_steps } => {
                    job.phase = name;
                    job.total_steps = total_steps;
                }
                TrainEvent::Step(rec) => job.records.push(rec),
            })
        });
        worker.update(id, |job| match result {
            Ok(outcome) => {
                job.state = JobState::Succeeded;
                job.outcome = Some(outcome);
            }
            Err(e) => {
                error!(job = id, "training failed: {e}");
                job.state = JobState::Failed;
                job.error = Some(e.to_string());
            }
        });
    });
    Ok((StatusCode::ACCEPTED, Json(JobCreated { job: id })))
}

#[derive(Debug, Deserialize)]
struct Since {
    #[serde(default)]
    since: usize,
}

async fn job_status(
    State(state): State<Arc<AppState>>,
    Path(id): Path<u64>,
    Query(q): Query<Since>,
) -> Reply<JobStatus> {
    let jobs = state.jobs.lock().expect("job table");
    let job = jobs
        .get(&id)
        .ok_or_else(|| AppError::new(StatusCode::NOT_FOUND, format!("no job {id}")))?;
    Ok(Json(JobStatus {
        job: id,
        state: job.state,
        phase: job.phase.clone(),
        total_steps: job.total_steps,
        steps_done: job.records.len() as u64,
        records: job.records.get(q.since..).unwrap_or_default().to_vec(),
        outcome: job.outcome.clone(),
        error: job.error.clone(),
    }))
}

async fn predict(Json(req): Json<PredictRequest>) -> Reply<PredictResponse> {
    Ok(Json(blocking(move || predict_files(&req)).await?))
}

async fn evaluate(Json(req): Json<EvaluateRequest>) -> Reply<EvaluateResponse> {
    Ok(Json(blocking(move || evaluate_dir(&req)).await?))
}

async fn augment(Json(req): Json<AugmentRequest>) -> Reply<AugmentResponse> {
    Ok(Json(blocking(move || augment_to_dir(&req)).await?))
}

async fn gradcheck(Json(req): Json<GradcheckRequest>) -> Reply<GradcheckResponse> {
    if req.trials == 0 {
        return Err(AppError::new(StatusCode::UNPROCESSABLE_ENTITY, "trials must be positive"));
    }
    Ok(Json(
        blocking(move || {
            let t0 = Instant::now();
            let reports = run_suite(req.trials, req.seed)?;
            Ok(GradcheckResponse {
                passed: reports.iter().all(|r| r.passed),
                reports,
                seconds: t0.elapsed().as_secs_f64(),
            })
        })
        .await?,
    ))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/v1/train", post(start_training))
        .route("/v1/jobs/{id}", get(job_status))
        .route("/v1/predict", post(predict))
        .route("/v1/evaluate", post(evaluate))
        .route("/v1/augment", post(augment))
        .route("/v1/gradcheck", post(gradcheck))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener) -> std::io::Result<()> {
    axum::serve(listener, router(Arc::new(AppState::default()))).await
}

/// Binds `addr` and serves in a background task. Returns the bound address,
/// useful with port 0.
pub async fn spawn(addr: SocketAddr) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener).await {
            error!("server stopped: {e}");
        }
    });
    Ok(local)
}
