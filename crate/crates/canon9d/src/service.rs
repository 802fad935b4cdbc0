//! HTTP interface for annotation and verification clients.
//!
//! Handlers share one [`Pipeline`] behind a mutex and run on the blocking
//! pool, so state and ledger writes are serialized.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use canon9d_core::geometry::{Pose9D, SimilarityTransform};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::ledger::Verdict;
use crate::manifest::Status;
use crate::pipeline::{now_timestamp, summarize, Phase, Pipeline, PipelineError};
use crate::records::{pose_from_json, pose_to_json, Pose15, PoseRecord, PoseSource};

/// Most vertices returned by the surface and view endpoints.
pub const MAX_RENDER_VERTICES: usize = 50_000;

type Shared = Arc<Mutex<Pipeline>>;

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::UnknownObject(_) => StatusCode::NOT_FOUND,
            PipelineError::Filtered(_) | PipelineError::NotAwaitingVerification(_) | PipelineError::NoPose(_) => {
                StatusCode::CONFLICT
            }
            PipelineError::InvalidPose(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

async fn with_pipeline<T, F>(shared: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Pipeline) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let mut guard = shared.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut guard)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

/// Advances after new input; an idle pipeline is not an error here.
fn nudge(p: &mut Pipeline) -> Result<(), ApiError> {
    match p.advance() {
        Ok(_) | Err(PipelineError::NoPending) => Ok(()),
        Err(e) => Err(e.into()),
    }
}

pub fn router(pipeline: Pipeline) -> Router {
    let shared: Shared = Arc::new(Mutex::new(pipeline));
    Router::new()
        .route("/clusters", get(clusters))
        .route("/stats", get(stats))
        .route("/objects/{id}/surface", get(surface))
        .route("/objects/{id}/views", get(views))
        .route("/objects/{id}/pose", post(submit_pose))
        .route("/objects/{id}/verdict", post(submit_verdict))
        .with_state(shared)
}

pub async fn serve(pipeline: Pipeline, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(pipeline))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Serialize)]
struct ClusterView {
    index: usize,
    medoid: String,
    members: Vec<String>,
    phase: Phase,
}

async fn clusters(State(shared): State<Shared>) -> Result<Json<Value>, ApiError> {
    with_pipeline(shared, |p| {
        let s = p.state();
        let clusters: Vec<ClusterView> = s
            .clusters
            .iter()
            .map(|c| ClusterView {
                index: c.index,
                medoid: c.medoid.clone(),
                members: c.members.clone(),
                phase: c.phase,
            })
            .collect();
        Ok(Json(json!({ "iteration": s.iteration, "clusters": clusters })))
    })
    .await
}

async fn stats(State(shared): State<Shared>) -> Result<Json<Value>, ApiError> {
    with_pipeline(shared, |p| Ok(Json(json!(summarize(p.state()))))).await
}

/// The object's current box and world → canonical transform, if any.
fn current_pose(p: &mut Pipeline, id: &str) -> Result<Option<(Pose9D, SimilarityTransform)>, PipelineError> {
    if let Some(c) = p.state().canonical.get(id) {
        let pose = pose_from_json(&c.world_pose)?;
        return Ok(Some((pose, SimilarityTransform::try_from(&c.world_to_canonical)?)));
    }
    let status = p.state().status(id).ok_or_else(|| PipelineError::UnknownObject(id.to_string()))?;
    if status == Status::Filtered {
        return Ok(None);
    }
    match p.proposal(id) {
        Ok(c) => return Ok(Some((c.world_pose(), c.world_to_canonical))),
        Err(PipelineError::NoPose(_)) => {}
        Err(e) => return Err(e),
    }
    if let Some(r) = p.state().references.get(id) {
        let pose = r.pose9d()?;
        let w2c = pose.placement().inverse();
        return Ok(Some((pose, w2c)));
    }
    Ok(None)
}

fn decimate(points: &[Vector3<f64>]) -> impl Iterator<Item = &Vector3<f64>> {
    let stride = points.len().div_ceil(MAX_RENDER_VERTICES).max(1);
    points.iter().step_by(stride)
}

async fn surface(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_pipeline(shared, move |p| {
        let surface = p.surface(&id)?;
        let vertices: Vec<[f64; 3]> = decimate(surface.vertices()).map(|v| [v.x, v.y, v.z]).collect();
        let pose = current_pose(p, &id)?.map(|(pose, _)| pose_to_json(&pose).to_vec());
        let s = p.state();
        Ok(Json(json!({
            "id": id,
            "status": s.status(&id),
            "phase": s.cluster_of(&id).map(|c| c.phase),
            "vertex_count": surface.len(),
            "vertices": vertices,
            "pose": pose,
        })))
    })
    .await
}

fn rectangle(w: f64, h: f64) -> [[f64; 2]; 4] {
    [[-w / 2.0, -h / 2.0], [w / 2.0, -h / 2.0], [w / 2.0, h / 2.0], [-w / 2.0, h / 2.0]]
}

async fn views(State(shared): State<Shared>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    with_pipeline(shared, move |p| {
        let surface = p.surface(&id)?;
        let (pose, w2c) = current_pose(p, &id)?.ok_or_else(|| PipelineError::NoPose(id.clone()))?;
        let pts: Vec<Vector3<f64>> = decimate(surface.vertices()).map(|v| w2c.apply_point(v)).collect();
        let e = pose.extents() * w2c.scale();
        let project = |a: usize, b: usize| pts.iter().map(|q| [q[a], q[b]]).collect::<Vec<_>>();
        Ok(Json(json!({
            "id": id,
            "extents": [e.x, e.y, e.z],
            "front": { "axes": ["x", "z"], "points": project(0, 2), "box": rectangle(e.x, e.z) },
            "top": { "axes": ["x", "y"], "points": project(0, 1), "box": rectangle(e.x, e.y) },
            "right": { "axes": ["y", "z"], "points": project(1, 2), "box": rectangle(e.y, e.z) },
        })))
    })
    .await
}

#[derive(Deserialize)]
struct PoseBody {
    pose: Vec<f64>,
    #[serde(default)]
    annotator_id: String,
    #[serde(default)]
    cross_verified: bool,
}

async fn submit_pose(
    State(shared): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let body: PoseBody = serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    let pose: Pose15 = body
        .pose
        .as_slice()
        .try_into()
        .map_err(|_| bad_request(format!("pose needs 15 numbers, got {}", body.pose.len())))?;
    let record = PoseRecord {
        object_id: id,
        pose,
        source: PoseSource::Manual,
        annotator_id: body.annotator_id,
        cross_verified: body.cross_verified,
    };
    with_pipeline(shared, move |p| {
        let id = record.object_id.clone();
        p.submit_pose(record)?;
        nudge(p)?;
        Ok(Json(json!({ "id": id, "status": p.state().status(&id) })))
    })
    .await
}

#[derive(Deserialize)]
struct VerdictBody {
    verdict: String,
    reviewer: String,
}

async fn submit_verdict(
    State(shared): State<Shared>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Value>, ApiError> {
    let body: VerdictBody = serde_json::from_slice(&body).map_err(|e| bad_request(e.to_string()))?;
    let verdict: Verdict = body.verdict.parse().map_err(bad_request)?;
    if body.reviewer.is_empty() || body.reviewer.contains(['\t', '\n', '\r']) {
        return Err(bad_request("reviewer must be a non-empty single-line string"));
    }
    with_pipeline(shared, move |p| {
        p.submit_verdict(&id, verdict, &body.reviewer, &now_timestamp())?;
        nudge(p)?;
        Ok(Json(json!({ "id": id, "status": p.state().status(&id) })))
    })
    .await
}
