use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use claas_core::evaluation::metrics_csv;

use crate::error::{ApiError, ApiResult};
use crate::service::Service;

const MAX_BODY: usize = 256 * 1024 * 1024;

pub fn router(service: Service) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/experiments", post(create).get(list))
        .route("/v1/experiments/{id}", get(status))
        .route("/v1/experiments/{id}/experiences", post(push))
        .route("/v1/experiments/{id}/jobs", post(trigger).get(jobs))
        .route("/v1/experiments/{id}/metrics", get(metrics))
        .route("/v1/experiments/{id}/versions", get(versions))
        .route("/v1/experiments/{id}/versions/{version}", get(version))
        .route("/v1/experiments/{id}/versions/{version}/weights", get(weights))
        .route("/v1/experiments/{id}/observe", post(observe))
        .route("/v1/experiments/{id}/audit", get(audit))
        .route("/v1/jobs/{job_id}", get(job))
        .fallback(|| async { ApiError::not_found("no such route") })
        .layer(DefaultBodyLimit::max(MAX_BODY))
        .with_state(service)
}

/// Runs a service call off the async executor; calls may touch the disk.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("request task failed: {e}")))?
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({"status": "ok"}))
}

#[derive(Serialize)]
struct Created {
    experiment_id: String,
}

async fn create(State(svc): State<Service>, body: Bytes) -> ApiResult<Response> {
    let id = blocking(move || svc.create_experiment(&body)).await?;
    Ok((StatusCode::CREATED, Json(Created { experiment_id: id })).into_response())
}

async fn list(State(svc): State<Service>) -> Json<Vec<String>> {
    Json(svc.list_experiments())
}

async fn status(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let s = blocking(move || svc.status(&id)).await?;
    Ok(Json(s).into_response())
}

async fn push(State(svc): State<Service>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let out = blocking(move || svc.push_experience(&id, &body)).await?;
    Ok((StatusCode::ACCEPTED, Json(out)).into_response())
}

async fn trigger(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || svc.trigger_job(&id)).await?;
    Ok((StatusCode::ACCEPTED, Json(out)).into_response())
}

async fn jobs(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || svc.jobs_of(&id)).await?;
    Ok(Json(out).into_response())
}

async fn job(State(svc): State<Service>, Path(job_id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || svc.job(&job_id)).await?;
    Ok(Json(out).into_response())
}

#[derive(Deserialize)]
struct FormatQuery {
    format: Option<String>,
}

async fn metrics(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<FormatQuery>,
) -> ApiResult<Response> {
    let csv = match q.format.as_deref() {
        None | Some("json") => false,
        Some("csv") => true,
        Some(other) => {
            return Err(ApiError::bad_request(format!("unknown format {other:?}, expected json or csv")).with_field("format"))
        }
    };
    let record = blocking(move || svc.metrics(&id)).await?;
    Ok(if csv {
        ([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], metrics_csv(&record)).into_response()
    } else {
        Json(record).into_response()
    })
}

#[derive(Deserialize)]
struct RunQuery {
    run: Option<usize>,
}

async fn versions(
    State(svc): State<Service>,
    Path(id): Path<String>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Response> {
    let out = blocking(move || svc.versions(&id, q.run)).await?;
    Ok(Json(out).into_response())
}

fn parse_version(v: &str) -> ApiResult<u64> {
    v.parse()
        .map_err(|_| ApiError::bad_request(format!("version {v:?} is not a number")).with_field("version"))
}

async fn version(
    State(svc): State<Service>,
    Path((id, v)): Path<(String, String)>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Response> {
    let v = parse_version(&v)?;
    let (record, _) = blocking(move || svc.version(&id, q.run.unwrap_or(0), v)).await?;
    Ok(Json(record).into_response())
}

async fn weights(
    State(svc): State<Service>,
    Path((id, v)): Path<(String, String)>,
    Query(q): Query<RunQuery>,
) -> ApiResult<Response> {
    let v = parse_version(&v)?;
    let (_, bytes) = blocking(move || svc.version(&id, q.run.unwrap_or(0), v)).await?;
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

async fn observe(State(svc): State<Service>, Path(id): Path<String>, body: Bytes) -> ApiResult<Response> {
    let out = blocking(move || svc.observe(&id, &body)).await?;
    Ok(Json(out).into_response())
}

async fn audit(State(svc): State<Service>, Path(id): Path<String>) -> ApiResult<Response> {
    let out = blocking(move || svc.audit_log(&id)).await?;
    Ok(Json(out).into_response())
}
