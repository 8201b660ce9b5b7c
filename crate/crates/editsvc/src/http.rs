//! HTTP/JSON surface: `/v1/estimate`, `/v1/edit`, `/v1/jobs/{id}`,
//! `/v1/model`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use facelab::au::AuDelta;
use facelab::sampler::{GuidanceConfig, SamplerKind};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::jobs::JobRequest;
use crate::service::{EditParams, RequestError, Service};

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for RequestError {
    fn into_response(self) -> Response {
        let status = match self {
            RequestError::BadRequest(_) => StatusCode::BAD_REQUEST,
            RequestError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            RequestError::NotFound(_) => StatusCode::NOT_FOUND,
            RequestError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateBody {
    /// Base64 PNG.
    pub image: String,
}

fn default_alpha() -> f64 {
    GuidanceConfig::default().alpha
}

fn default_true() -> bool {
    true
}

fn default_steps() -> usize {
    50
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditBody {
    pub image: String,
    /// Delta grammar, e.g. `"AU4=-6,AU12=+2"`.
    #[serde(default)]
    pub delta: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_true")]
    pub guidance: bool,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn parse_json<T: DeserializeOwned>(body: &Bytes) -> Result<T, RequestError> {
    serde_json::from_slice(body).map_err(|e| RequestError::BadRequest(format!("malformed request body: {e}")))
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/v1/estimate", post(estimate))
        .route("/v1/edit", post(edit))
        .route("/v1/jobs/{id}", get(job))
        .route("/v1/model", get(model))
        .with_state(svc)
}

async fn estimate(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, RequestError> {
    let b: EstimateBody = parse_json(&body)?;
    let img = svc.decode_image(&b.image)?;
    let est = Arc::clone(&svc.estimator);
    let report = tokio::task::spawn_blocking(move || est.estimate(&img))
        .await
        .map_err(|e| RequestError::Internal(e.to_string()))?
        .map_err(|e| RequestError::BadRequest(format!("estimate failed: {e}")))?;
    Ok(Json(report).into_response())
}

/// Validates an edit body: grammar errors are 400, deltas beyond the
/// inference cap 422.
pub fn validate_edit(svc: &Service, b: EditBody) -> Result<EditParams, RequestError> {
    let delta = AuDelta::parse(&b.delta).map_err(|e| RequestError::BadRequest(format!("delta: {e}")))?;
    delta
        .check_inference_range()
        .map_err(|e| RequestError::Unprocessable(format!("delta: {e}")))?;
    GuidanceConfig {
        alpha: b.alpha,
        enabled: b.guidance,
    }
    .validate()
    .map_err(|e| RequestError::BadRequest(e.to_string()))?;
    let t = svc.model.schedule.len();
    if b.steps == 0 || b.steps > t {
        return Err(RequestError::BadRequest(format!("steps: must be in 1..={t}")));
    }
    let image = svc.decode_image(&b.image)?;
    Ok(EditParams {
        image,
        request: JobRequest {
            delta: delta.to_delta_string(),
            au_delta: delta.values().to_vec(),
            alpha: b.alpha,
            guidance: b.guidance,
            sampler: b.sampler,
            steps: b.steps,
            seed: b.seed,
            image_sha256: String::new(),
            image_size: 0,
        },
    })
}

async fn edit(State(svc): State<Arc<Service>>, body: Bytes) -> Result<Response, RequestError> {
    let b: EditBody = parse_json(&body)?;
    let params = validate_edit(&svc, b)?;
    let job = svc.submit(params).map_err(|e| RequestError::Internal(format!("{e:#}")))?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn job(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Response, RequestError> {
    svc.jobs
        .get(&id)
        .map(|j| Json(j).into_response())
        .ok_or_else(|| RequestError::NotFound(format!("unknown job {id}")))
}

async fn model(State(svc): State<Arc<Service>>) -> Response {
    Json(svc.card.clone()).into_response()
}
