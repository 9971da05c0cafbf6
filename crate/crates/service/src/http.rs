//! REST routes over [`SessionService`].

use std::net::SocketAddr;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use icontra_core::{AttentionControlConfig, EditRequest, Image};
use serde::Deserialize;
use serde_json::json;

use crate::model::Lineage;
use crate::service::{ServiceError, SessionService};

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Invalid(_) => StatusCode::BAD_REQUEST,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(json!({ "error": self.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ServiceError>;

pub fn router(service: SessionService) -> Router {
    Router::new()
        .route(
            "/sessions",
            post(create_session)
                .get(list_sessions)
                // room for the multipart framing around a maximal image
                .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES + 64 * 1024)),
        )
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/cells/{cell}", get(get_cell))
        .route("/sessions/{id}/cells/{cell}/generate", post(generate))
        .route("/sessions/{id}/cells/{cell}/import", post(import))
        .route("/jobs/{id}", get(get_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .route("/results/{id}/{file}", get(result_file))
        .with_state(service)
}

/// Serves until ctrl-c, then lets the worker finish its current job.
pub async fn serve(service: SessionService, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(service.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    tokio::task::spawn_blocking(move || service.shutdown())
        .await
        .map_err(std::io::Error::other)
}

/// Decodes an uploaded PNG or JPEG into linear `[0, 1]` RGB.
pub fn decode_upload(bytes: &[u8]) -> ApiResult<Image> {
    if bytes.len() > MAX_UPLOAD_BYTES {
        return Err(ServiceError::TooLarge(format!(
            "image is {} bytes, limit is {MAX_UPLOAD_BYTES}",
            bytes.len()
        )));
    }
    let decoded =
        image::load_from_memory(bytes).map_err(|e| ServiceError::Invalid(format!("cannot decode image: {e}")))?;
    let rgb = decoded.to_rgb8();
    Ok(Image::from_rgb8(rgb.width() as usize, rgb.height() as usize, rgb.as_raw())?)
}

async fn create_session(State(service): State<SessionService>, mut form: Multipart) -> ApiResult<Response> {
    let mut upload: Option<Bytes> = None;
    let mut caption = String::new();
    let mut object_prompt: Option<String> = None;
    let bad = |e: axum::extract::multipart::MultipartError| {
        if e.status() == StatusCode::PAYLOAD_TOO_LARGE {
            ServiceError::TooLarge(format!("upload exceeds {MAX_UPLOAD_BYTES} bytes"))
        } else {
            ServiceError::Invalid(format!("malformed form: {e}"))
        }
    };
    while let Some(field) = form.next_field().await.map_err(bad)? {
        match field.name().unwrap_or_default() {
            "image" => upload = Some(field.bytes().await.map_err(bad)?),
            "caption" => caption = field.text().await.map_err(bad)?,
            "object_prompt" => object_prompt = Some(field.text().await.map_err(bad)?),
            _ => {}
        }
    }
    let bytes = upload.ok_or_else(|| ServiceError::Invalid("missing form field \"image\"".into()))?;
    let (session, job) = tokio::task::spawn_blocking(move || {
        let image = decode_upload(&bytes)?;
        service.create_session(&image, &caption, object_prompt.as_deref())
    })
    .await
    .map_err(|e| ServiceError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(json!({ "session": session, "job": job }))).into_response())
}

async fn list_sessions(State(service): State<SessionService>) -> Response {
    Json(service.sessions()).into_response()
}

async fn get_session(State(service): State<SessionService>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(service.session(&id)?).into_response())
}

async fn get_cell(
    State(service): State<SessionService>,
    Path((id, cell)): Path<(String, usize)>,
) -> ApiResult<Response> {
    Ok(Json(service.cell(&id, cell)?).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenerateBody {
    prompt: String,
    #[serde(default)]
    config: AttentionControlConfig,
    guidance_scale: Option<f64>,
    seed: Option<u64>,
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ServiceError::Invalid(format!("invalid request body: {e}")))
}

async fn generate(
    State(service): State<SessionService>,
    Path((id, cell)): Path<(String, usize)>,
    body: Bytes,
) -> ApiResult<Response> {
    let body: GenerateBody = parse_body(&body)?;
    let mut request = EditRequest::new(body.prompt);
    request.config = body.config;
    if let Some(g) = body.guidance_scale {
        request.guidance_scale = g;
    }
    if let Some(s) = body.seed {
        request.seed = s;
    }
    let job = service.generate(&id, cell, request)?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImportBody {
    from_cell: usize,
    ordinal: usize,
}

async fn import(
    State(service): State<SessionService>,
    Path((id, cell)): Path<(String, usize)>,
    body: Bytes,
) -> ApiResult<Response> {
    let body: ImportBody = parse_body(&body)?;
    let cell = service.import_to_cell(
        &id,
        cell,
        Lineage {
            cell: body.from_cell,
            ordinal: body.ordinal,
        },
    )?;
    Ok(Json(cell).into_response())
}

async fn get_job(State(service): State<SessionService>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(service.job(&id)?).into_response())
}

async fn cancel_job(State(service): State<SessionService>, Path(id): Path<String>) -> ApiResult<Response> {
    Ok(Json(service.cancel_job(&id)?).into_response())
}

async fn result_file(
    State(service): State<SessionService>,
    Path((id, file)): Path<(String, String)>,
) -> ApiResult<Response> {
    let path = service.result_file(&id, &file)?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ServiceError::Internal(format!("{}: {e}", path.display())))?;
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}
