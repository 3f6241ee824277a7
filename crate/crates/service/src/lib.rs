//! HTTP facade over a catalog and the query pipeline.
//!
//! Routes live under `/api/v1`, mirrored at `/api`. Mutations go through a
//! single catalog writer; queries pin the current generation and reads are
//! served from a snapshot, so neither waits on a rebuild.

pub mod api;
mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use hotspot::ann::ImageId;
use hotspot::catalog::{BuildParams, Catalog, CatalogError, Generation, ImageRecord, LabelRecord};
use hotspot::features::{FeatureSet, GrayImage, Roi};
use hotspot::harness::{run_query, QueryConfig};
use hotspot::scoring::LabelId;
use serde::de::DeserializeOwned;
use tower_http::services::ServeDir;

pub use api::*;
pub use error::ApiError;

/// Candidates with overlays returned when the request does not say.
pub const DEFAULT_MAX_CANDIDATES: usize = 10;
const MAX_UPLOAD_BYTES: usize = 64 * 1024 * 1024;

/// Read-only copy of the catalog records, replaced after every mutation.
#[derive(Debug, Default)]
struct CatalogView {
    images: Vec<ImageRecord>,
    labels: Vec<LabelRecord>,
    dirty: bool,
}

impl CatalogView {
    fn of(catalog: &Catalog) -> Self {
        Self { images: catalog.images().to_vec(), labels: catalog.labels().to_vec(), dirty: catalog.is_dirty() }
    }
}

pub struct AppState {
    writer: Mutex<Catalog>,
    view: RwLock<Arc<CatalogView>>,
    generation: RwLock<Option<Arc<Generation>>>,
    build: BuildParams,
    static_dir: Option<PathBuf>,
}

impl AppState {
    /// Wraps an open catalog, loading its current generation if one exists.
    pub fn new(catalog: Catalog, build: BuildParams, static_dir: Option<PathBuf>) -> Result<Arc<Self>, CatalogError> {
        let generation = match catalog.load_current_generation() {
            Ok(g) => Some(g),
            Err(CatalogError::NoGeneration) => None,
            Err(e) => return Err(e),
        };
        Ok(Arc::new(Self {
            view: RwLock::new(Arc::new(CatalogView::of(&catalog))),
            writer: Mutex::new(catalog),
            generation: RwLock::new(generation),
            build,
            static_dir,
        }))
    }

    pub fn current_generation(&self) -> Option<Arc<Generation>> {
        self.generation.read().expect("generation lock").clone()
    }

    fn view(&self) -> Arc<CatalogView> {
        self.view.read().expect("view lock").clone()
    }

    /// Runs `f` as the single catalog writer on a blocking thread, then
    /// republishes the snapshot.
    async fn write<T: Send + 'static>(
        self: &Arc<Self>,
        f: impl FnOnce(&mut Catalog) -> Result<T, CatalogError> + Send + 'static,
    ) -> Result<T, ApiError> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let mut catalog = state.writer.lock().map_err(|_| ApiError::Internal("catalog writer poisoned".into()))?;
            let out = f(&mut catalog);
            *state.view.write().expect("view lock") = Arc::new(CatalogView::of(&catalog));
            Ok(out?)
        })
        .await?
    }

    /// Query defaults: library defaults adjusted to what the current
    /// generation was built with.
    fn default_config(&self) -> QueryConfig {
        let mut config = QueryConfig {
            backend: self.build.backend,
            descriptor_variant: self.build.variant,
            num_trees: self.build.forest.num_trees,
            max_checks: self.build.forest.max_checks,
            seed: self.build.seed,
            ..Default::default()
        };
        if let Some(g) = self.current_generation() {
            config.backend = g.index.backend();
            config.descriptor_variant = g.variant();
        }
        config
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/status", get(status))
        .route("/labels", get(labels))
        .route("/images", post(add_image))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/label", post(label_image))
        .route("/rebuild", post(rebuild))
        .route("/query", post(query))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES));
    let app = Router::new().nest("/api/v1", api.clone()).nest("/api", api);
    let app = match &state.static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app,
    };
    app.with_state(state)
}

/// Binds `addr` and serves until the process is stopped.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

fn parse_json<T: DeserializeOwned + Default>(body: &[u8]) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

#[derive(Default)]
struct UploadForm {
    image: Option<Bytes>,
    roi: Option<Roi>,
    config: Option<serde_json::Value>,
    label: Option<String>,
    max_candidates: Option<usize>,
}

async fn read_form(mut multipart: Multipart, allowed: &[&str]) -> Result<UploadForm, ApiError> {
    let bad = |m: String| ApiError::BadRequest(m);
    let mut form = UploadForm::default();
    while let Some(field) = multipart.next_field().await.map_err(|e| bad(e.body_text()))? {
        let name = field.name().unwrap_or_default().to_string();
        if !allowed.contains(&name.as_str()) {
            return Err(bad(format!("unknown field {name:?}")));
        }
        if name == "image" {
            form.image = Some(field.bytes().await.map_err(|e| bad(e.body_text()))?);
            continue;
        }
        let text = field.text().await.map_err(|e| bad(e.body_text()))?;
        match name.as_str() {
            "roi" => form.roi = Some(text.parse().map_err(bad)?),
            "config" => {
                form.config =
                    Some(serde_json::from_str(&text).map_err(|e| bad(format!("config is not JSON: {e}")))?)
            }
            "label" => form.label = Some(text),
            "max_candidates" => {
                form.max_candidates = Some(text.trim().parse().map_err(|e| bad(format!("max_candidates: {e}")))?)
            }
            _ => unreachable!("checked against allowed"),
        }
    }
    Ok(form)
}

fn decode_image(bytes: Option<Bytes>) -> Result<GrayImage, ApiError> {
    let bytes = bytes.ok_or_else(|| ApiError::BadRequest("missing image field".into()))?;
    GrayImage::decode(&bytes).map_err(|e| ApiError::BadRequest(e.to_string()))
}

/// Layers request overrides onto `base`; unknown keys are rejected.
fn merge_config(base: QueryConfig, overrides: Option<serde_json::Value>) -> Result<QueryConfig, ApiError> {
    let Some(overrides) = overrides else { return Ok(base) };
    let serde_json::Value::Object(over) = overrides else {
        return Err(ApiError::BadRequest("config must be a JSON object".into()));
    };
    let mut merged = serde_json::to_value(base).expect("config serializes");
    let obj = merged.as_object_mut().expect("config is an object");
    for (k, v) in over {
        if !obj.contains_key(&k) {
            return Err(ApiError::BadRequest(format!("unknown config field {k:?}")));
        }
        obj.insert(k, v);
    }
    serde_json::from_value(merged).map_err(|e| ApiError::BadRequest(format!("config: {e}")))
}

async fn status(State(state): State<Arc<AppState>>) -> Json<StatusResponse> {
    let view = state.view();
    Json(StatusResponse {
        generation: state.current_generation().map(|g| g.id()),
        dirty: view.dirty,
        image_count: view.images.len(),
        label_count: view.labels.len(),
        default_config: state.default_config(),
    })
}

async fn labels(State(state): State<Arc<AppState>>) -> Json<LabelsResponse> {
    let view = state.view();
    Json(LabelsResponse::new(state.current_generation().map(|g| g.id()), &view.images, &view.labels))
}

async fn get_image(State(state): State<Arc<AppState>>, Path(id): Path<ImageId>) -> Result<Json<ImageRecord>, ApiError> {
    state
        .view()
        .images
        .iter()
        .find(|r| r.image_id == id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("image {id} not found")))
}

async fn add_image(
    State(state): State<Arc<AppState>>,
    multipart: Multipart,
) -> Result<(StatusCode, Json<ImageRecord>), ApiError> {
    let form = read_form(multipart, &["image", "roi", "label"]).await?;
    let image = decode_image(form.image)?;
    let (roi, label) = (form.roi, form.label);
    let record = state.write(move |c| c.add_upload(&image, roi, label.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(record)))
}

async fn label_image(
    State(state): State<Arc<AppState>>,
    Path(id): Path<ImageId>,
    body: Bytes,
) -> Result<Json<ImageRecord>, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Err(ApiError::BadRequest("missing body".into()));
    }
    let req: LabelRequest = serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))?;
    let record = state
        .write(move |c| {
            c.get_image(id)?;
            if req.new {
                c.create_label(&req.name)?;
            }
            c.assign_label(id, &req.name)
        })
        .await?;
    Ok(Json(record))
}

async fn rebuild(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<RebuildResponse>, ApiError> {
    let req: RebuildRequest = parse_json(&body)?;
    let mut params = state.build;
    if let Some(backend) = req.backend {
        params.backend = backend;
    }
    let generation = state.write(move |c| c.build_generation(params)).await?;
    *state.generation.write().expect("generation lock") = Some(generation.clone());
    Ok(Json(RebuildResponse {
        generation: generation.id(),
        backend: generation.index.backend(),
        image_count: generation.image_ids().len(),
        descriptor_count: generation.index.pool().len(),
    }))
}

struct Pinned {
    generation: Arc<Generation>,
    rois: HashMap<ImageId, Roi>,
}

impl LabelLookup for Pinned {
    fn label_of(&self, image: ImageId) -> Option<LabelId> {
        self.generation.label_of(image)
    }

    fn label_name(&self, label: LabelId) -> Option<String> {
        self.generation.label_name(label).map(str::to_string)
    }

    fn features(&self, image: ImageId) -> Option<Arc<FeatureSet>> {
        self.generation.features(image)
    }

    fn roi(&self, image: ImageId) -> Option<Roi> {
        self.rois.get(&image).copied()
    }
}

async fn query(State(state): State<Arc<AppState>>, multipart: Multipart) -> Result<Json<QueryResponse>, ApiError> {
    let form = read_form(multipart, &["image", "roi", "config", "max_candidates"]).await?;
    let image = decode_image(form.image)?;
    let generation = state
        .current_generation()
        .ok_or_else(|| ApiError::Conflict("no index generation has been built".into()))?;
    let config = merge_config(state.default_config(), form.config)?;
    let roi = form.roi.unwrap_or_else(|| Roi::full(&image));
    let max_candidates = form.max_candidates.unwrap_or(DEFAULT_MAX_CANDIDATES);
    let rois = state.view().images.iter().map(|r| (r.image_id, r.roi)).collect();
    let response = tokio::task::spawn_blocking(move || -> Result<QueryResponse, ApiError> {
        let (result, features) = run_query(&generation, &image, roi, &config)?;
        let clipped = roi.clip(image.width(), image.height()).unwrap_or(roi);
        Ok(QueryResponse::build(&result, &features, clipped, max_candidates, &Pinned { generation, rois }))
    })
    .await??;
    Ok(Json(response))
}
