//! Local HTTP API backing the annotation UI.
//!
//! The server is read-mostly: cluster models and sample patches are loaded
//! once; the only mutation is saving the catalog, which is validated first
//! and then written with an atomic replace under a lock (last write wins).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode, Uri};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use docsynth::catalog::{render_overlay, validate_catalog, ClusterCatalog, LayerRole};
use docsynth::clustering::{assign_stack, AssignmentMap, ClusterModel, MAX_SAMPLE_STACKS};
use docsynth::io::{encode_rgb_png, read_bytes, sha256_hex, write_atomic};
use docsynth::pipeline::{layout, load_models};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Mutex;

use crate::corpus::CorpusManifest;
use crate::error::{CliError, CliResult};

pub struct AppState {
    pub catalog_path: PathBuf,
    pub models: Vec<ClusterModel>,
    corpus: CorpusManifest,
    /// Per sample patch, one assignment map per layer.
    assignments: Vec<Vec<AssignmentMap>>,
    /// Per layer, pixel counts of each cluster over all sample patches.
    cluster_pixels: Vec<Vec<usize>>,
    ui_dir: Option<PathBuf>,
    save_lock: Mutex<()>,
}

impl AppState {
    /// Loads models and up to `samples` corpus patches from a run directory.
    pub fn load(run_dir: &Path, samples: usize, ui_dir: Option<PathBuf>) -> CliResult<Self> {
        let models_dir = run_dir.join(layout::MODELS_DIR);
        if !models_dir.is_dir() {
            return Err(CliError::validation(format!(
                "no cluster models in {}; run `fit-clusters` first",
                models_dir.display()
            )));
        }
        let models = load_models(&models_dir)?;
        let corpus = CorpusManifest::load(run_dir)?;
        let n = samples.min(MAX_SAMPLE_STACKS).min(corpus.entries.len());
        let mut assignments = Vec::with_capacity(n);
        for i in 0..n {
            assignments.push(assign_stack(&models, &corpus.stack(i)?)?);
        }
        let mut cluster_pixels: Vec<Vec<usize>> = models.iter().map(|m| vec![0; m.k]).collect();
        for per_patch in &assignments {
            for (layer, a) in per_patch.iter().enumerate() {
                for (total, c) in cluster_pixels[layer].iter_mut().zip(a.counts()) {
                    *total += c;
                }
            }
        }
        Ok(Self {
            catalog_path: run_dir.join(layout::CATALOG),
            models,
            corpus,
            assignments,
            cluster_pixels,
            ui_dir,
            save_lock: Mutex::new(()),
        })
    }

    fn layer_index(&self, layer_id: usize) -> Option<usize> {
        self.models.iter().position(|m| m.layer_id == layer_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerInfo {
    pub layer_id: usize,
    pub size: usize,
    pub role: LayerRole,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub id: usize,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterList {
    pub layer_id: usize,
    pub k: usize,
    pub clusters: Vec<ClusterInfo>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct OverlayQuery {
    #[serde(default)]
    pub patch: usize,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/layers", get(layers))
        .route("/api/layers/{layer}/clusters", get(clusters))
        .route("/api/layers/{layer}/clusters/{cluster}/overlay", get(overlay))
        .route("/api/patches", get(patch_count))
        .route("/api/patches/{index}", get(patch))
        .route("/api/catalog", get(get_catalog).post(post_catalog))
        .fallback(static_file)
        .with_state(state)
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn layers(State(s): State<Arc<AppState>>) -> Json<Vec<LayerInfo>> {
    Json(
        s.models
            .iter()
            .map(|m| LayerInfo {
                layer_id: m.layer_id,
                size: m.layer_size,
                role: LayerRole::for_size(m.layer_size),
                k: m.k,
            })
            .collect(),
    )
}

async fn clusters(State(s): State<Arc<AppState>>, UrlPath(layer): UrlPath<usize>) -> Response {
    let Some(i) = s.layer_index(layer) else {
        return error(StatusCode::NOT_FOUND, format!("no layer {layer}"));
    };
    let clusters = s.cluster_pixels[i]
        .iter()
        .enumerate()
        .map(|(id, &pixels)| ClusterInfo { id, pixels })
        .collect();
    Json(ClusterList { layer_id: layer, k: s.models[i].k, clusters }).into_response()
}

async fn overlay(
    State(s): State<Arc<AppState>>,
    UrlPath((layer, cluster)): UrlPath<(usize, usize)>,
    Query(q): Query<OverlayQuery>,
) -> Response {
    let Some(i) = s.layer_index(layer) else {
        return error(StatusCode::NOT_FOUND, format!("no layer {layer}"));
    };
    let Some(per_patch) = s.assignments.get(q.patch) else {
        return error(StatusCode::NOT_FOUND, format!("no sample patch {}", q.patch));
    };
    if cluster >= s.models[i].k {
        return error(StatusCode::NOT_FOUND, format!("no cluster {cluster} in layer {layer}"));
    }
    let rendered = s
        .corpus
        .image(q.patch)
        .map_err(|e| e.error.to_string())
        .and_then(|img| render_overlay(&img, &per_patch[i], cluster).map_err(|e| e.to_string()))
        .and_then(|o| encode_rgb_png(&o).map_err(|e| e.to_string()));
    match rendered {
        Ok(bytes) => png(bytes),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn patch_count(State(s): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "count": s.assignments.len() }))
}

async fn patch(State(s): State<Arc<AppState>>, UrlPath(index): UrlPath<usize>) -> Response {
    if index >= s.assignments.len() {
        return error(StatusCode::NOT_FOUND, format!("no sample patch {index}"));
    }
    match s.corpus.image_bytes(index) {
        Ok(bytes) => png(bytes),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.error),
    }
}

async fn get_catalog(State(s): State<Arc<AppState>>) -> Response {
    let _guard = s.save_lock.lock().await;
    let text = if s.catalog_path.exists() {
        match read_bytes(&s.catalog_path) {
            Ok(b) => String::from_utf8_lossy(&b).into_owned(),
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
        }
    } else {
        ClusterCatalog::default().to_json().expect("empty catalog serializes")
    };
    ([(header::CONTENT_TYPE, "application/json")], text).into_response()
}

async fn post_catalog(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let catalog: ClusterCatalog = match serde_json::from_slice(&body) {
        Ok(c) => c,
        Err(e) => {
            return (
                StatusCode::BAD_REQUEST,
                Json(json!({ "valid": false, "error": format!("malformed catalog: {e}") })),
            )
                .into_response()
        }
    };
    let report = validate_catalog(&catalog, &s.models);
    if !report.is_valid() {
        let messages: Vec<String> = report.issues.iter().map(ToString::to_string).collect();
        return (
            StatusCode::UNPROCESSABLE_ENTITY,
            Json(json!({ "valid": false, "issues": report.issues, "messages": messages })),
        )
            .into_response();
    }
    let text = match catalog.to_json() {
        Ok(t) => t,
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e),
    };
    let _guard = s.save_lock.lock().await;
    match write_atomic(&s.catalog_path, text.as_bytes()) {
        Ok(()) => Json(json!({ "valid": true, "sha256": sha256_hex(text.as_bytes()) })).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

/// Serves the built UI, if a directory was given.
async fn static_file(State(s): State<Arc<AppState>>, uri: Uri) -> Response {
    let Some(root) = &s.ui_dir else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    let rel = uri.path().trim_start_matches('/');
    let rel = if rel.is_empty() { "index.html" } else { rel };
    if rel.split('/').any(|part| part == ".." || part.is_empty()) {
        return error(StatusCode::BAD_REQUEST, "invalid path");
    }
    let path = root.join(rel);
    let Ok(bytes) = std::fs::read(&path) else {
        return error(StatusCode::NOT_FOUND, "not found");
    };
    let mime = match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    };
    ([(header::CONTENT_TYPE, mime)], bytes).into_response()
}

/// Binds and serves until the process is stopped.
pub fn serve(state: AppState, addr: std::net::SocketAddr) -> CliResult<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(CliError::runtime)?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::runtime(anyhow::anyhow!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(CliError::runtime)?;
        eprintln!("annotation server listening on http://{local}");
        axum::serve(listener, router(Arc::new(state)))
            .await
            .map_err(CliError::runtime)
    })
}
