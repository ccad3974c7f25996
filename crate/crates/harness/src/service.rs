//! Annotation collection service.
//!
//! `GET /api/forms/{id}` serves the public view of a form,
//! `POST /api/forms/{id}/responses` validates and appends a response, and
//! `GET /api/responses?form={id}` exports stored responses as JSON lines to
//! callers holding the operator token.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use iie_core::annotation::{accept_submission, AnnotationBundle, FieldError, ResponseSubmission, SubmissionError};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::io::AsyncWriteExt;
use tower_http::services::ServeDir;

use crate::error::{io_err, json_err, HarnessError, Result};

/// Request bodies above this size are rejected before parsing.
pub const MAX_BODY_BYTES: usize = 256 * 1024;

/// Append-only JSON-lines store, one file per form. Appends to the same form
/// are serialized.
#[derive(Debug)]
pub struct ResponseStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl ResponseStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(ResponseStore {
            dir,
            locks: Mutex::new(HashMap::new()),
        })
    }

    pub fn path_for(&self, form_id: &str) -> PathBuf {
        self.dir.join(format!("{form_id}.jsonl"))
    }

    fn lock_for(&self, form_id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table poisoned")
            .entry(form_id.to_string())
            .or_default()
            .clone()
    }

    pub async fn append(&self, form_id: &str, line: &str) -> std::io::Result<()> {
        let lock = self.lock_for(form_id);
        let _guard = lock.lock().await;
        let mut f = tokio::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path_for(form_id))
            .await?;
        f.write_all(format!("{line}\n").as_bytes()).await?;
        f.sync_data().await
    }

    pub async fn export(&self, form_id: &str) -> std::io::Result<String> {
        let lock = self.lock_for(form_id);
        let _guard = lock.lock().await;
        match tokio::fs::read_to_string(self.path_for(form_id)).await {
            Ok(s) => Ok(s),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(String::new()),
            Err(e) => Err(e),
        }
    }
}

pub struct AppState {
    pub forms: BTreeMap<String, AnnotationBundle>,
    pub store: ResponseStore,
    pub operator_token: String,
}

/// Loads every `*.json` bundle in `dir`, keyed by form id.
pub fn load_forms(dir: &Path) -> Result<BTreeMap<String, AnnotationBundle>> {
    let mut forms = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
        let bundle: AnnotationBundle = serde_json::from_str(&text).map_err(json_err(&path))?;
        if forms.contains_key(&bundle.form_id) {
            return Err(HarnessError::Usage(format!(
                "duplicate form id {:?} in {}",
                bundle.form_id,
                path.display()
            )));
        }
        forms.insert(bundle.form_id.clone(), bundle);
    }
    Ok(forms)
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Accepted {
    pub response_id: String,
    pub annotator_id: String,
}

#[derive(Debug, Deserialize)]
pub struct ExportQuery {
    pub form: Option<String>,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn field_errors(fields: Vec<FieldError>) -> Response {
    (
        StatusCode::UNPROCESSABLE_ENTITY,
        Json(json!({ "error": "validation failed", "fields": fields })),
    )
        .into_response()
}

async fn get_form(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    match state.forms.get(&id) {
        Some(bundle) => Json(bundle.public_view()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown form {id:?}")),
    }
}

fn opaque_id(prefix: &str) -> String {
    format!("{prefix}-{}", uuid::Uuid::new_v4().simple())
}

async fn post_response(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Some(bundle) = state.forms.get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown form {id:?}"));
    };
    let submission: ResponseSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => {
            return field_errors(vec![FieldError {
                field: "body".into(),
                message: e.to_string(),
            }])
        }
    };
    let response_id = opaque_id("r");
    let annotator_id = opaque_id("a");
    let record = match accept_submission(bundle, submission, &response_id, &annotator_id) {
        Ok(r) => r,
        Err(SubmissionError::Invalid(fields)) => return field_errors(fields),
    };
    let line = serde_json::to_string(&record).expect("response serializes");
    if let Err(e) = state.store.append(&id, &line).await {
        return error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("could not persist response: {e}"),
        );
    }
    (
        StatusCode::CREATED,
        Json(Accepted {
            response_id,
            annotator_id,
        }),
    )
        .into_response()
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn export_responses(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    Query(q): Query<ExportQuery>,
) -> Response {
    if state.operator_token.is_empty() || bearer(&headers) != Some(state.operator_token.as_str()) {
        return error(StatusCode::UNAUTHORIZED, "operator token required");
    }
    let Some(form) = q.form else {
        return error(StatusCode::BAD_REQUEST, "missing form query parameter");
    };
    if !state.forms.contains_key(&form) {
        return error(StatusCode::NOT_FOUND, format!("unknown form {form:?}"));
    }
    match state.store.export(&form).await {
        Ok(text) => ([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response(),
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            format!("could not read responses: {e}"),
        ),
    }
}

/// Builds the service. With `static_dir`, unmatched paths serve files from it.
pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/forms/{id}", get(get_form))
        .route("/api/forms/{id}/responses", post(post_response))
        .route("/api/responses", get(export_responses))
        .layer(axum::extract::DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}
