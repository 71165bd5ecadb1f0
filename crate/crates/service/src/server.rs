//! HTTP API over a root directory of tiled cores.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::Utc;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::manifest::{pyramid_paths, read_manifest, CoreManifest, MANIFEST_FILE};
use crate::records::{GradeRecord, RecordLog, READS_FILE};

#[derive(Debug, Clone)]
struct AppState {
    root: Arc<PathBuf>,
    log: Arc<RecordLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoreEntry {
    pub core_id: String,
    pub depth: usize,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
enum ApiError {
    NotFound(String),
    Unprocessable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m),
            ApiError::Unprocessable(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
            ApiError::Internal(m) => {
                warn!("{m}");
                (StatusCode::INTERNAL_SERVER_ERROR, m)
            }
        };
        (status, Json(ErrorBody { error })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Accept plain names only, so ids can never escape the root.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && !id.starts_with('.') && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

fn core_dir(state: &AppState, id: &str) -> ApiResult<PathBuf> {
    let dir = state.root.join(id);
    if valid_id(id) && dir.join(MANIFEST_FILE).is_file() {
        Ok(dir)
    } else {
        Err(ApiError::NotFound(format!("no core {id:?}")))
    }
}

fn manifest_of(state: &AppState, id: &str) -> ApiResult<(PathBuf, CoreManifest)> {
    let dir = core_dir(state, id)?;
    let m = read_manifest(&dir).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok((dir, m))
}

fn z_of(m: &CoreManifest, z: &str) -> ApiResult<usize> {
    match z.parse::<usize>() {
        Ok(z) if z < m.depth => Ok(z),
        _ => Err(ApiError::NotFound(format!("core {} has no section {z:?}", m.core_id))),
    }
}

/// Cores are the subdirectories of the root that hold a manifest.
pub fn list_cores(root: &Path) -> std::io::Result<Vec<CoreEntry>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if !valid_id(&name) || !entry.path().join(MANIFEST_FILE).is_file() {
            continue;
        }
        match read_manifest(&entry.path()) {
            Ok(m) => out.push(CoreEntry {
                core_id: name,
                depth: m.depth,
                width: m.width,
                height: m.height,
            }),
            Err(e) => warn!("skipping {name}: {e}"),
        }
    }
    out.sort_by(|a, b| a.core_id.cmp(&b.core_id));
    Ok(out)
}

async fn cores(State(s): State<AppState>) -> ApiResult<Json<Vec<CoreEntry>>> {
    let root = s.root.clone();
    tokio::task::spawn_blocking(move || list_cores(&root))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn manifest(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<CoreManifest>> {
    Ok(Json(manifest_of(&s, &id)?.1))
}

async fn read_file(path: &Path, what: &str) -> ApiResult<Vec<u8>> {
    tokio::fs::read(path).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError::NotFound(format!("no {what}")),
        _ => ApiError::Internal(format!("{}: {e}", path.display())),
    })
}

async fn descriptor(State(s): State<AppState>, UrlPath((id, z)): UrlPath<(String, String)>) -> ApiResult<Response> {
    let (dir, m) = manifest_of(&s, &id)?;
    let z = z_of(&m, &z)?;
    let bytes = read_file(&pyramid_paths(&dir, z).descriptor, "descriptor").await?;
    Ok(([(header::CONTENT_TYPE, "application/xml")], bytes).into_response())
}

fn parse_tile(name: &str) -> Option<(usize, usize)> {
    let (x, y) = name.strip_suffix(".jpg")?.split_once('_')?;
    Some((x.parse().ok()?, y.parse().ok()?))
}

async fn tile(State(s): State<AppState>, UrlPath((id, z, level, name)): UrlPath<(String, String, String, String)>) -> ApiResult<Response> {
    let (dir, m) = manifest_of(&s, &id)?;
    let z = z_of(&m, &z)?;
    let missing = || ApiError::NotFound(format!("no tile {level}/{name}"));
    let level: u32 = level.parse().map_err(|_| missing())?;
    let (x, y) = parse_tile(&name).ok_or_else(missing)?;
    let bytes = read_file(&pyramid_paths(&dir, z).tile(level, x, y), "tile").await?;
    Ok(([(header::CONTENT_TYPE, "image/jpeg")], bytes).into_response())
}

async fn list_reads(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Vec<GradeRecord>>> {
    let path = core_dir(&s, &id)?.join(READS_FILE);
    tokio::task::spawn_blocking(move || RecordLog::read_all(&path))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
        .map_err(|e| ApiError::Internal(e.to_string()))
}

async fn post_read(State(s): State<AppState>, UrlPath(id): UrlPath<String>, Json(mut record): Json<GradeRecord>) -> ApiResult<(StatusCode, Json<GradeRecord>)> {
    let path = core_dir(&s, &id)?.join(READS_FILE);
    if record.core_id != id {
        return Err(ApiError::Unprocessable(format!("record is for core {:?}, posted to {id:?}", record.core_id)));
    }
    record.validate().map_err(|e| ApiError::Unprocessable(e.to_string()))?;
    record.timestamp = Some(Utc::now());
    let log = s.log.clone();
    let stored = record.clone();
    tokio::task::spawn_blocking(move || log.append(&path, &stored))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    info!("{id}: read from {}", record.reader_id);
    Ok((StatusCode::CREATED, Json(record)))
}

/// The API alone.
pub fn router(root: impl Into<PathBuf>) -> Router {
    router_with_static(root, None)
}

/// The API, with `static_dir` (the viewer bundle) served for every other path.
pub fn router_with_static(root: impl Into<PathBuf>, static_dir: Option<PathBuf>) -> Router {
    let state = AppState {
        root: Arc::new(root.into()),
        log: Arc::new(RecordLog::new()),
    };
    let api = Router::new()
        .route("/cores", get(cores))
        .route("/cores/{id}/manifest", get(manifest))
        .route("/cores/{id}/z/{z}/image.dzi", get(descriptor))
        .route("/cores/{id}/z/{z}/files/{level}/{tile}", get(tile))
        .route("/cores/{id}/z/{z}/image_files/{level}/{tile}", get(tile))
        .route("/cores/{id}/reads", get(list_reads).post(post_read))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serve until Ctrl-C.
pub async fn serve(root: PathBuf, addr: SocketAddr, static_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("serving {} on http://{}", root.display(), listener.local_addr()?);
    axum::serve(listener, router_with_static(root, static_dir))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_and_tiles() {
        assert!(valid_id("core-01_a.b"));
        assert!(!valid_id(".."));
        assert!(!valid_id("a/b"));
        assert!(!valid_id(""));
        assert_eq!(parse_tile("3_14.jpg"), Some((3, 14)));
        assert_eq!(parse_tile("3_14.png"), None);
        assert_eq!(parse_tile("x_1.jpg"), None);
    }
}
