use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;

use crate::error::LabelError;
use crate::store::LabelStore;
use crate::vote::{Choice, Stage};

pub type SharedStore = Arc<Mutex<LabelStore>>;

#[derive(Debug, Deserialize)]
struct TaskQuery {
    judge: String,
}

#[derive(Debug, Deserialize)]
pub struct VoteBody {
    pub judge: String,
    pub image_id: String,
    pub stage: Stage,
    pub choice: Choice,
}

impl IntoResponse for LabelError {
    fn into_response(self) -> Response {
        let status = match &self {
            LabelError::UnknownJudge(_) => StatusCode::FORBIDDEN,
            LabelError::UnknownImage(_) => StatusCode::NOT_FOUND,
            LabelError::BadChoice(_) => StatusCode::UNPROCESSABLE_ENTITY,
            LabelError::NotServed { .. }
            | LabelError::StageViolation { .. }
            | LabelError::ConflictingDuplicate { .. }
            | LabelError::PanelFull(_)
            | LabelError::IncompletePanel { .. } => StatusCode::CONFLICT,
            LabelError::BadLog { .. } | LabelError::Io(_) | LabelError::Json(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

// Every handler holds the lock for its whole body, so votes reach the log
// one at a time.
fn lock(store: &SharedStore) -> MutexGuard<'_, LabelStore> {
    store.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

async fn task(State(store): State<SharedStore>, Query(q): Query<TaskQuery>) -> Result<Response, LabelError> {
    Ok(match lock(&store).next_task(&q.judge)? {
        Some(t) => Json(t).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn vote(State(store): State<SharedStore>, Json(body): Json<VoteBody>) -> Result<Response, LabelError> {
    let ack = lock(&store).submit_vote(&body.judge, &body.image_id, body.stage, body.choice)?;
    Ok(Json(ack).into_response())
}

async fn dispositions(State(store): State<SharedStore>) -> Response {
    Json(lock(&store).dispositions()).into_response()
}

async fn image(State(store): State<SharedStore>, Path((id, file)): Path<(String, String)>) -> Result<Response, LabelError> {
    let store = lock(&store);
    let item = store.image(&id).ok_or_else(|| LabelError::UnknownImage(id.clone()))?;
    let bytes = match file.as_str() {
        "unperturbed.png" => item.unperturbed_png.clone(),
        "perturbed.png" => item.perturbed_png.clone(),
        _ => return Err(LabelError::UnknownImage(format!("{id}/{file}"))),
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(store: SharedStore) -> Router {
    Router::new()
        .route("/api/task", get(task))
        .route("/api/vote", post(vote))
        .route("/api/dispositions", get(dispositions))
        .route("/api/images/{id}/{file}", get(image))
        .with_state(store)
}

pub async fn serve(store: SharedStore, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(store)).await
}
