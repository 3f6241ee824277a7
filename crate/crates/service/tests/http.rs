use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use hotspot::catalog::{BuildParams, Catalog};
use hotspot::features::{DescriptorVariant, GrayImage};
use hotspot::harness::{render_label_image, QueryConfig, SynthParams};
use hotspot_service::{router, AppState, QueryResponse};
use serde_json::Value;
use tower::ServiceExt;

const BOUNDARY: &str = "hotspot-test-boundary";

fn synth() -> SynthParams {
    SynthParams { n_labels: 4, width: 256, height: 192, ..Default::default() }
}

fn png(label: usize, view: u64) -> Vec<u8> {
    render_label_image(&synth(), label, view).encode_png().unwrap()
}

enum Part<'a> {
    Text(&'a str, &'a str),
    File(&'a str, Vec<u8>),
}

fn multipart(parts: Vec<Part<'_>>) -> Vec<u8> {
    let mut body = Vec::new();
    for part in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        match part {
            Part::Text(name, value) => {
                body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{name}\"\r\n\r\n{value}\r\n").as_bytes());
            }
            Part::File(name, bytes) => {
                body.extend_from_slice(
                    format!("Content-Disposition: form-data; name=\"{name}\"; filename=\"x.png\"\r\nContent-Type: image/png\r\n\r\n")
                        .as_bytes(),
                );
                body.extend_from_slice(&bytes);
                body.extend_from_slice(b"\r\n");
            }
        }
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

struct Server {
    app: Router,
    state: Arc<AppState>,
    _dir: tempfile::TempDir,
}

impl Server {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let catalog = Catalog::create(dir.path(), DescriptorVariant::RootSift).unwrap();
        let state = AppState::new(catalog, QueryConfig::default().build_params(), None).unwrap();
        Self { app: router(state.clone()), state, _dir: dir }
    }

    async fn send(&self, req: Request<Body>) -> (StatusCode, Value) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send(Request::get(uri).body(Body::empty()).unwrap()).await
    }

    async fn post_json(&self, uri: &str, body: &str) -> (StatusCode, Value) {
        let req = Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string()));
        self.send(req.unwrap()).await
    }

    async fn post_form(&self, uri: &str, parts: Vec<Part<'_>>) -> (StatusCode, Value) {
        let req = Request::post(uri)
            .header("content-type", format!("multipart/form-data; boundary={BOUNDARY}"))
            .body(Body::from(multipart(parts)));
        self.send(req.unwrap()).await
    }

    async fn upload(&self, label: Option<&str>, image: Vec<u8>) -> u64 {
        let mut parts = vec![Part::File("image", image)];
        if let Some(l) = label {
            parts.push(Part::Text("label", l));
        }
        let (status, body) = self.post_form("/api/v1/images", parts).await;
        assert_eq!(status, StatusCode::CREATED, "{body}");
        body["image_id"].as_u64().unwrap()
    }

    async fn query(&self, image: Vec<u8>) -> QueryResponse {
        let (status, body) = self.post_form("/api/v1/query", vec![Part::File("image", image)]).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        serde_json::from_value(body).unwrap()
    }

    /// Two views each of labels 0..n, named `animal-<i>`.
    async fn seed(&self, n: usize) {
        for label in 0..n {
            for view in 0..2 {
                self.upload(Some(&format!("animal-{label}")), png(label, view)).await;
            }
        }
    }
}

#[tokio::test]
async fn empty_catalog_conflicts() {
    let s = Server::new();
    let (status, body) = s.post_json("/api/v1/rebuild", "").await;
    assert_eq!(status, StatusCode::CONFLICT, "{body}");
    let (status, _) = s.post_form("/api/v1/query", vec![Part::File("image", png(0, 0))]).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, body) = s.get("/api/v1/status").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["generation"], Value::Null);
    assert_eq!(body["image_count"], 0);
}

#[tokio::test]
async fn unknown_image_is_404() {
    let s = Server::new();
    assert_eq!(s.get("/api/v1/images/99").await.0, StatusCode::NOT_FOUND);
    assert_eq!(s.post_json("/api/v1/images/99/label", r#"{"name": "x"}"#).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_payloads_are_400() {
    let s = Server::new();
    let id = s.upload(None, png(0, 0)).await;
    let uri = format!("/api/v1/images/{id}/label");
    assert_eq!(s.post_json(&uri, r#"{"name": "a", "colour": 1}"#).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(s.post_json(&uri, "{not json").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(s.post_json(&uri, "").await.0, StatusCode::BAD_REQUEST);
    assert_eq!(s.post_json("/api/v1/rebuild", r#"{"backend": "kdforest", "x": 1}"#).await.0, StatusCode::BAD_REQUEST);
    let (status, _) = s.post_form("/api/v1/images", vec![Part::File("image", b"not an image".to_vec())]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s.post_form("/api/v1/images", vec![Part::File("image", png(0, 1)), Part::Text("extra", "1")]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s.post_form("/api/v1/images", vec![Part::File("image", png(0, 1)), Part::Text("roi", "1,2,3")]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn label_collision_with_new_is_400() {
    let s = Server::new();
    let a = s.upload(Some("stripes"), png(0, 0)).await;
    let b = s.upload(None, png(1, 0)).await;
    let (status, body) = s.post_json(&format!("/api/v1/images/{b}/label"), r#"{"name": "stripes", "new": true}"#).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
    // Without `new` the existing label is reused.
    let (status, body) = s.post_json(&format!("/api/v1/images/{b}/label"), r#"{"name": "stripes"}"#).await;
    assert_eq!(status, StatusCode::OK);
    let (_, image_a) = s.get(&format!("/api/v1/images/{a}")).await;
    assert_eq!(body["label_id"], image_a["label_id"]);
    let (_, labels) = s.get("/api/labels").await;
    assert_eq!(labels["labels"].as_array().unwrap().len(), 1);
    assert_eq!(labels["labels"][0]["image_count"], 2);
}

#[tokio::test]
async fn query_ranks_and_overlays() {
    let s = Server::new();
    s.seed(3).await;
    let (status, body) = s.post_json("/api/v1/rebuild", "").await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["generation"], 1);

    let resp = s.query(png(1, 7)).await;
    assert_eq!(resp.generation, 1);
    assert_eq!(resp.labels.len(), 3);
    assert_eq!(resp.labels[0].name, "animal-1");
    assert!(resp.labels.windows(2).all(|w| w[0].score >= w[1].score));
    assert!(resp.candidates.windows(2).all(|w| w[0].score >= w[1].score));
    let top = &resp.candidates[0];
    assert_eq!(top.label_name.as_deref(), Some("animal-1"));
    assert!(top.reranked_score.is_some());
    assert!(!top.matches.is_empty());
    let features = s.state.current_generation().unwrap().features(top.image_id).unwrap();
    for m in &top.matches {
        assert!((m.query_index as usize) < resp.query_keypoints);
        let kp = &features.keypoints[m.db_index as usize];
        assert_eq!((m.database.x, m.database.y), (kp.x, kp.y));
    }
    assert_eq!(resp.config.k, 1);
}

#[tokio::test]
async fn query_roi_and_config_errors() {
    let s = Server::new();
    s.seed(2).await;
    s.post_json("/api/rebuild", "").await;
    let (status, body) =
        s.post_form("/api/v1/query", vec![Part::File("image", png(0, 3)), Part::Text("roi", "1000,1000,50,50")]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    let (status, _) = s
        .post_form("/api/v1/query", vec![Part::File("image", png(0, 3)), Part::Text("config", r#"{"kk": 3}"#)])
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = s
        .post_form("/api/v1/query", vec![Part::File("image", png(0, 3)), Part::Text("config", r#"{"backend": "pq"}"#)])
        .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, body) = s
        .post_form(
            "/api/v1/query",
            vec![
                Part::File("image", png(0, 3)),
                Part::Text("roi", "20,10,200,160"),
                Part::Text("config", r#"{"k": 3, "delta": "LNBNN", "k_sr": 0}"#),
            ],
        )
        .await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let resp: QueryResponse = serde_json::from_value(body).unwrap();
    assert_eq!((resp.config.k, resp.config.k_sr), (3, Some(0)));
    assert_eq!(resp.query_frame.roi.w, 200);
    assert!(resp.candidates.iter().all(|c| c.reranked_score.is_none()));
}

#[tokio::test]
async fn confirm_rebuild_requery_loop() {
    let s = Server::new();
    s.seed(3).await;
    s.post_json("/api/v1/rebuild", "").await;

    // A new animal: query, confirm under a new label, rebuild, query again.
    let first = s.query(png(3, 0)).await;
    assert!(first.labels.iter().all(|l| l.name != "animal-3"));
    let id = s.upload(None, png(3, 0)).await;
    let (status, _) = s.post_json(&format!("/api/v1/images/{id}/label"), r#"{"name": "animal-3", "new": true}"#).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s.get("/api/v1/status").await.1["dirty"], true);

    // Confirmation alone does not change search results.
    assert_eq!(s.query(png(3, 1)).await.generation, 1);

    let (_, rebuilt) = s.post_json("/api/v1/rebuild", "").await;
    assert_eq!(rebuilt["generation"], 2);
    let again = s.query(png(3, 1)).await;
    assert_eq!(again.generation, 2);
    assert!(again.candidates.iter().take(5).any(|c| c.image_id == id));
    assert_eq!(again.labels[0].name, "animal-3");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn query_during_rebuild_uses_pinned_generation() {
    let s = Server::new();
    s.seed(3).await;
    s.post_json("/api/v1/rebuild", "").await;
    s.upload(Some("animal-0"), png(0, 5)).await;

    let app = s.app.clone();
    let rebuild = tokio::spawn(async move {
        let req = Request::post("/api/v1/rebuild").body(Body::from(r#"{"backend": "kdforest"}"#)).unwrap();
        app.oneshot(req).await.unwrap().status()
    });
    let during = s.query(png(0, 9)).await;
    let (status, labels) = s.get("/api/v1/labels").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(labels["labels"].as_array().unwrap().len(), 3);
    assert_eq!(rebuild.await.unwrap(), StatusCode::OK);
    assert!(during.generation == 1 || during.generation == 2);
    assert_eq!(during.labels[0].name, "animal-0");
    assert_eq!(s.query(png(0, 9)).await.generation, 2);
}

#[tokio::test]
async fn static_assets_served_at_root() {
    let dir = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html>review</html>").unwrap();
    let catalog = Catalog::create(dir.path(), DescriptorVariant::RootSift).unwrap();
    let state = AppState::new(catalog, BuildParams::default(), Some(assets.path().to_path_buf())).unwrap();
    let resp = router(state).oneshot(Request::get("/").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>review</html>");
}

#[tokio::test]
async fn state_reloads_existing_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut catalog = Catalog::create(dir.path(), DescriptorVariant::RootSift).unwrap();
    for (label, view) in [(0, 0), (0, 1), (1, 0)] {
        let img = GrayImage::decode(&png(label, view)).unwrap();
        catalog.add_upload(&img, None, Some(&format!("animal-{label}"))).unwrap();
    }
    catalog.build_generation(BuildParams::default()).unwrap();
    drop(catalog);
    let state = AppState::new(Catalog::open(dir.path()).unwrap(), BuildParams::default(), None).unwrap();
    assert_eq!(state.current_generation().unwrap().id(), 1);
}
