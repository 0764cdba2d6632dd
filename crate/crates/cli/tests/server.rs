mod common;

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use docsynth::catalog::ClusterCatalog;
use docsynth_cli::server::{router, AppState, ClusterList, LayerInfo};
use http_body_util::BodyExt;
use tower::ServiceExt;

/// Builds a run directory with a corpus, cluster models and an oracle catalog,
/// then moves the catalog aside so the server starts without one.
fn prepared_run(dir: &Path) -> (std::path::PathBuf, ClusterCatalog) {
    let config = common::write_config(dir);
    let c = config.to_str().unwrap();
    let run = dir.join("run");
    common::assert_success(&common::docsynth(&run, &["--config", c, "gen-corpus"]));
    common::assert_success(&common::docsynth(&run, &["--config", c, "fit-clusters", "--oracle-catalog"]));
    let text = std::fs::read_to_string(run.join("catalog.json")).unwrap();
    std::fs::remove_file(run.join("catalog.json")).unwrap();
    (run, ClusterCatalog::from_json(&text).unwrap())
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, String, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(body.into()).unwrap()
}

fn json(body: &[u8]) -> serde_json::Value {
    serde_json::from_slice(body).unwrap()
}

const PNG_MAGIC: &[u8] = b"\x89PNG";

#[tokio::test]
async fn serves_layers_clusters_patches_and_overlays() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = prepared_run(dir.path());
    let state = AppState::load(&run, 4, None).unwrap();
    let app = router(Arc::new(state));

    let (status, ctype, body) = send(&app, get("/api/layers")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("application/json"));
    let layers: Vec<LayerInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(layers.len(), 8);
    assert!(layers.iter().all(|l| l.k == 20));

    let layer = layers.last().unwrap().layer_id;
    let (status, _, body) = send(&app, get(&format!("/api/layers/{layer}/clusters"))).await;
    assert_eq!(status, StatusCode::OK);
    let list: ClusterList = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.clusters.len(), 20);
    let size = layers.last().unwrap().size;
    assert_eq!(list.clusters.iter().map(|c| c.pixels).sum::<usize>(), 4 * size * size);

    let (status, _, body) = send(&app, get("/api/patches")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body)["count"], 4);

    let (status, ctype, body) = send(&app, get("/api/patches/3")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    assert!(body.starts_with(PNG_MAGIC));

    let (status, ctype, body) = send(&app, get(&format!("/api/layers/{layer}/clusters/0/overlay?patch=2"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    assert!(body.starts_with(PNG_MAGIC));

    for uri in [
        "/api/patches/4".to_string(),
        "/api/layers/999/clusters".to_string(),
        format!("/api/layers/{layer}/clusters/20/overlay"),
        format!("/api/layers/{layer}/clusters/0/overlay?patch=4"),
        "/index.html".to_string(),
    ] {
        let (status, _, _) = send(&app, get(&uri)).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
    }
}

#[tokio::test]
async fn catalog_saves_are_validated_and_persisted() {
    let dir = tempfile::tempdir().unwrap();
    let (run, oracle) = prepared_run(dir.path());
    let app = router(Arc::new(AppState::load(&run, 2, None).unwrap()));

    // No catalog yet: an empty one is served.
    let (status, _, body) = send(&app, get("/api/catalog")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json(&body), serde_json::json!({ "layers": [] }));

    let (status, _, body) = send(&app, post("/api/catalog", "{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json(&body)["valid"], false);

    // Dropping one cluster label leaves it unassigned.
    let mut incomplete = oracle.clone();
    let layer = incomplete.layers.iter_mut().find(|l| !l.clusters.is_empty()).unwrap();
    layer.clusters.pop();
    let (status, _, body) = send(&app, post("/api/catalog", incomplete.to_json().unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let verdict = json(&body);
    assert_eq!(verdict["valid"], false);
    assert_eq!(verdict["issues"].as_array().unwrap().len(), 1);
    assert!(verdict["messages"][0].as_str().unwrap().contains("unassigned"));
    assert!(!run.join("catalog.json").exists(), "invalid catalogs are not written");

    let text = oracle.to_json().unwrap();
    let (status, _, body) = send(&app, post("/api/catalog", text.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let verdict = json(&body);
    assert_eq!(verdict["valid"], true);
    assert_eq!(verdict["sha256"], oracle.hash().unwrap());
    assert_eq!(std::fs::read_to_string(run.join("catalog.json")).unwrap(), text);

    // Reading back returns the saved catalog byte for byte.
    let (status, _, body) = send(&app, get("/api/catalog")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(String::from_utf8(body).unwrap(), text);

    // The saved catalog drives fusion.
    let config = dir.path().join("tiny.toml");
    common::assert_success(&common::docsynth(&run, &["--config", config.to_str().unwrap(), "fuse-preview", "--count", "2"]));

    // A fresh server sees the persisted catalog.
    let app = router(Arc::new(AppState::load(&run, 1, None).unwrap()));
    let (_, _, body) = send(&app, get("/api/catalog")).await;
    assert_eq!(ClusterCatalog::from_json(std::str::from_utf8(&body).unwrap()).unwrap(), oracle);
}

#[tokio::test]
async fn concurrent_saves_leave_one_complete_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let (run, oracle) = prepared_run(dir.path());
    let app = router(Arc::new(AppState::load(&run, 1, None).unwrap()));
    let text = oracle.to_json().unwrap();
    let tasks: Vec<_> = (0..8)
        .map(|_| {
            let app = app.clone();
            let text = text.clone();
            tokio::spawn(async move { send(&app, post("/api/catalog", text)).await.0 })
        })
        .collect();
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    assert_eq!(std::fs::read_to_string(run.join("catalog.json")).unwrap(), text);
}

#[tokio::test]
async fn serves_the_ui_directory() {
    let dir = tempfile::tempdir().unwrap();
    let (run, _) = prepared_run(dir.path());
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<html>annotate</html>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "console.log(1)").unwrap();
    let app = router(Arc::new(AppState::load(&run, 1, Some(ui)).unwrap()));

    let (status, ctype, body) = send(&app, get("/")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.starts_with("text/html"));
    assert_eq!(body, b"<html>annotate</html>");
    let (status, ctype, _) = send(&app, get("/assets/app.js")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(ctype.contains("javascript"));
    let (status, _, _) = send(&app, get("/../tiny.toml")).await;
    assert_ne!(status, StatusCode::OK);
}

#[test]
fn loading_without_models_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = AppState::load(dir.path(), 10, None).err().unwrap();
    assert_eq!(err.kind.exit_code(), 3);
}
