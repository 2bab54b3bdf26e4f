//! HTTP JSON API over an identity index.
//!
//! Queries run against an immutable snapshot of the index; confirmations are
//! serialized, journaled, applied to a copy, persisted and then swapped in.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::extract::{DefaultBodyLimit, Multipart, Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use norppa_core::encoder::{encode_embedding, load_embedding, save_embedding};
use norppa_core::features::save_descriptors;
use norppa_core::harness::{
    confirm_match, embedding_to_f64, verify_matches, ConfirmRequest, HarnessError, Journal, Pipeline, PipelineConfig,
    PipelineInput,
};
use norppa_core::index::{load_index, save_index, IdentityIndex};

pub type Index = IdentityIndex<f64>;

pub const ENV_INDEX: &str = "NORPPA_INDEX";
pub const ENV_CONFIG: &str = "NORPPA_CONFIG";
pub const ENV_PORT: &str = "NORPPA_PORT";
pub const DEFAULT_PORT: u16 = 8080;

const MAX_UPLOAD: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("index: {0}")]
    Index(#[from] norppa_core::index::IndexError),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("internal: {0}")]
    Internal(String),
}

/// Error response carrying the status, message, optional stage and config hash.
pub struct ApiError {
    status: StatusCode,
    error: ServiceError,
    config_hash: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let stage = match &self.error {
            ServiceError::Harness(h) => h.stage().map(|s| s.as_str()),
            _ => None,
        };
        let body = json!({
            "error": self.error.to_string(),
            "stage": stage,
            "config-hash": self.config_hash,
        });
        (self.status, Json(body)).into_response()
    }
}

/// Everything the service needs to start.
#[derive(Debug, Clone)]
pub struct ServiceSettings {
    pub index_path: PathBuf,
    /// When absent the config stored in the index is used.
    pub config: Option<PipelineConfig>,
    /// Query embeddings and descriptors awaiting confirmation; defaults to `<index>.state`.
    pub state_dir: Option<PathBuf>,
}

impl ServiceSettings {
    /// Reads `NORPPA_INDEX` and, if set, `NORPPA_CONFIG`.
    pub fn from_env() -> Result<Self, ServiceError> {
        let index_path = std::env::var_os(ENV_INDEX)
            .map(PathBuf::from)
            .ok_or_else(|| ServiceError::BadRequest(format!("{ENV_INDEX} is not set")))?;
        let config = match std::env::var_os(ENV_CONFIG) {
            Some(p) => Some(PipelineConfig::load(p)?),
            None => None,
        };
        Ok(Self { index_path, config, state_dir: None })
    }
}

pub fn port_from_env() -> Result<u16, ServiceError> {
    match std::env::var(ENV_PORT) {
        Ok(p) => p.parse().map_err(|_| ServiceError::BadRequest(format!("{ENV_PORT}={p} is not a port"))),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

struct Inner {
    index: RwLock<Arc<Index>>,
    pipeline: Pipeline<f64>,
    config_hash: String,
    index_path: PathBuf,
    descriptor_base: PathBuf,
    state_dir: PathBuf,
    journal: Arc<tokio::sync::Mutex<Journal>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Loads the index, checks the config hash, and replays any journaled
    /// confirmations the index file does not yet contain.
    pub fn open(settings: ServiceSettings) -> Result<Self, ServiceError> {
        let mut index: Index = load_index(&settings.index_path)?;
        let config = match settings.config {
            Some(c) => c,
            None => PipelineConfig::from_value(&index.config)?,
        };
        let pipeline = Pipeline::from_index(&index, &config)?;
        let journal = Journal::open(journal_path(&settings.index_path))?;
        if journal.replay(&mut index)? > 0 {
            save_index(&index, &settings.index_path)?;
        }
        let state_dir = settings.state_dir.unwrap_or_else(|| {
            let mut s = settings.index_path.as_os_str().to_owned();
            s.push(".state");
            PathBuf::from(s)
        });
        std::fs::create_dir_all(state_dir.join("queries")).map_err(HarnessError::from)?;
        let descriptor_base = settings.index_path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self(Arc::new(Inner {
            index: RwLock::new(Arc::new(index)),
            config_hash: config.hash(),
            pipeline,
            index_path: settings.index_path,
            descriptor_base,
            state_dir,
            journal: Arc::new(tokio::sync::Mutex::new(journal)),
        })))
    }

    pub fn config_hash(&self) -> &str {
        &self.0.config_hash
    }

    /// The current index snapshot.
    pub fn snapshot(&self) -> Arc<Index> {
        self.0.index.read().expect("index lock").clone()
    }

    fn err(&self, status: StatusCode, error: impl Into<ServiceError>) -> ApiError {
        ApiError { status, error: error.into(), config_hash: self.0.config_hash.clone() }
    }

    fn pending_path(&self, embedding_ref: &str, ext: &str) -> PathBuf {
        self.0.state_dir.join("queries").join(format!("{embedding_ref}.{ext}"))
    }
}

/// `<index>.journal`.
pub fn journal_path(index_path: &Path) -> PathBuf {
    let mut s = index_path.as_os_str().to_owned();
    s.push(".journal");
    PathBuf::from(s)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/query", post(query))
        .route("/individuals", get(individuals))
        .route("/individuals/{id}/images", get(individual_images))
        .route("/confirm", post(confirm))
        .route("/health", get(health))
        .route("/config", get(config))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD))
        .with_state(state)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn status_for(e: &HarnessError) -> StatusCode {
    match e {
        HarnessError::Stage { .. } => StatusCode::UNPROCESSABLE_ENTITY,
        HarnessError::Confirm(m) if m.starts_with("duplicate") || m.contains("already exists") => StatusCode::CONFLICT,
        HarnessError::Confirm(m) if m.starts_with("unknown individual") => StatusCode::NOT_FOUND,
        HarnessError::Confirm(_) | HarnessError::Config(_) | HarnessError::Manifest(_) => StatusCode::BAD_REQUEST,
        HarnessError::ConfigMismatch { .. } => StatusCode::CONFLICT,
        HarnessError::Journal(_) | HarnessError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn valid_ref(r: &str) -> bool {
    !r.is_empty()
        && r.len() <= 200
        && r.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !r.starts_with('.')
}

fn sanitize(id: &str) -> String {
    let s: String =
        id.chars().map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_') { c } else { '_' }).collect();
    if s.is_empty() {
        "query".into()
    } else {
        s
    }
}

async fn query(State(state): State<AppState>, mut form: Multipart) -> Result<Json<Value>, ApiError> {
    let bad = |m: String| state.err(StatusCode::BAD_REQUEST, ServiceError::BadRequest(m));
    let mut file: Option<(Vec<u8>, Option<String>)> = None;
    let mut image_id = None;
    let mut k = None;
    while let Some(field) = form.next_field().await.map_err(|e| bad(e.to_string()))? {
        match field.name().unwrap_or_default() {
            "file" => {
                let name = field.file_name().map(str::to_string);
                let bytes = field.bytes().await.map_err(|e| bad(e.to_string()))?;
                file = Some((bytes.to_vec(), name));
            }
            "image-id" => image_id = Some(field.text().await.map_err(|e| bad(e.to_string()))?),
            "k" => {
                let t = field.text().await.map_err(|e| bad(e.to_string()))?;
                k = Some(
                    t.trim()
                        .parse::<usize>()
                        .ok()
                        .filter(|&k| k >= 1)
                        .ok_or_else(|| bad(format!("invalid k {t:?}")))?,
                );
            }
            other => return Err(bad(format!("unexpected field {other:?}"))),
        }
    }
    let (bytes, file_name) = file.ok_or_else(|| bad("missing multipart field \"file\"".into()))?;
    let image_id = image_id.or_else(|| {
        file_name.map(|n| Path::new(&n).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or(n))
    });
    let image_id = image_id.filter(|s| !s.is_empty()).ok_or_else(|| bad("no image-id and no file name".into()))?;

    let st = state.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<Value, ApiError> {
        let harness = |e: HarnessError| st.err(status_for(&e), e);
        let index = st.snapshot();
        let input = PipelineInput::from_bytes(&bytes, &image_id).map_err(harness)?;
        let out = st.0.pipeline.run(&input).map_err(harness)?;
        let k = k.unwrap_or(st.0.pipeline.config.query.k);
        let mut result =
            verify_matches(&st.0.pipeline, &index, &out, k, Some(&st.0.descriptor_base)).map_err(harness)?;
        result.query_image_id = image_id.clone();
        let digest = Sha256::digest(encode_embedding(&out.embedding));
        let embedding_ref = format!("{}-{}", sanitize(&image_id), &hex(&digest)[..12]);
        let internal = |e: String| st.err(StatusCode::INTERNAL_SERVER_ERROR, ServiceError::Internal(e));
        save_embedding(&out.embedding, st.pending_path(&embedding_ref, "nrpf")).map_err(|e| internal(e.to_string()))?;
        save_descriptors(&out.descriptors, st.pending_path(&embedding_ref, "nrpd"))
            .map_err(|e| internal(e.to_string()))?;
        result.embedding_ref = Some(embedding_ref);
        Ok(serde_json::to_value(&result).expect("result serializes"))
    })
    .await
    .map_err(|e| state.err(StatusCode::INTERNAL_SERVER_ERROR, ServiceError::Internal(e.to_string())))??;
    Ok(Json(result))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct IndividualSummary {
    individual_id: String,
    image_count: usize,
}

/// Body of `GET /individuals`.
pub fn individuals_body(index: &Index, config_hash: &str) -> Value {
    let list: Vec<IndividualSummary> = index
        .individuals()
        .into_iter()
        .map(|(individual_id, image_count)| IndividualSummary { individual_id, image_count })
        .collect();
    json!({ "config-hash": config_hash, "individuals": list })
}

/// Body of `GET /individuals/{id}/images`; `None` for an unknown individual.
pub fn images_body(index: &Index, config_hash: &str, id: &str) -> Option<Value> {
    let images = index.images_of(id);
    if images.is_empty() {
        return None;
    }
    Some(json!({ "config-hash": config_hash, "individual-id": id, "images": images }))
}

/// Body of `GET /health`.
pub fn health_body(index: &Index, config_hash: &str) -> Value {
    json!({
        "status": "ok",
        "config-hash": config_hash,
        "entries": index.len(),
        "individuals": index.individuals().len(),
        "state": index.state(),
        "dim": index.dim(),
    })
}

/// Body of `GET /config`.
pub fn config_body(config: &PipelineConfig) -> Value {
    json!({ "config-hash": config.hash(), "config": config.to_value() })
}

async fn individuals(State(state): State<AppState>) -> Json<Value> {
    Json(individuals_body(&state.snapshot(), state.config_hash()))
}

async fn individual_images(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
) -> Result<Json<Value>, ApiError> {
    images_body(&state.snapshot(), state.config_hash(), &id)
        .map(Json)
        .ok_or_else(|| state.err(StatusCode::NOT_FOUND, ServiceError::NotFound(format!("unknown individual {id}"))))
}

/// Body of `POST /confirm`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConfirmBody {
    pub query_image_id: String,
    #[serde(default)]
    pub individual_id: Option<String>,
    #[serde(default)]
    pub new: bool,
    pub embedding_ref: String,
}

async fn confirm(
    State(state): State<AppState>,
    body: Result<Json<ConfirmBody>, axum::extract::rejection::JsonRejection>,
) -> Result<Json<Value>, ApiError> {
    let bad = |m: String| state.err(StatusCode::BAD_REQUEST, ServiceError::BadRequest(m));
    let Json(body) = body.map_err(|e| bad(e.body_text()))?;
    let individual_id =
        body.individual_id.clone().filter(|s| !s.is_empty()).ok_or_else(|| bad("individual-id is required".into()))?;
    if !valid_ref(&body.embedding_ref) {
        return Err(bad(format!("invalid embedding-ref {:?}", body.embedding_ref)));
    }
    let nrpf = state.pending_path(&body.embedding_ref, "nrpf");
    let nrpd = state.pending_path(&body.embedding_ref, "nrpd");
    if !nrpf.exists() {
        return Err(state.err(
            StatusCode::NOT_FOUND,
            ServiceError::NotFound(format!("unknown embedding-ref {}", body.embedding_ref)),
        ));
    }
    let fv = load_embedding::<f64>(&nrpf)
        .map_err(|e| state.err(StatusCode::INTERNAL_SERVER_ERROR, ServiceError::Internal(e.to_string())))?;
    let request = ConfirmRequest {
        query_image_id: body.query_image_id.clone(),
        individual_id,
        new_individual: body.new,
        embedding: embedding_to_f64(fv.values()),
        descriptor_ref: nrpd.exists().then(|| nrpd.to_string_lossy().into_owned()),
    };

    // Single writer: the journal mutex serializes confirmations.
    let mut journal = state.0.journal.clone().lock_owned().await;
    let st = state.clone();
    let (entry, individual_count, image_count) = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut next: Index = (*st.snapshot()).clone();
        let entry = confirm_match(&mut next, Some(&mut journal), &request).map_err(|e| st.err(status_for(&e), e))?;
        save_index(&next, &st.0.index_path).map_err(|e| st.err(StatusCode::INTERNAL_SERVER_ERROR, e))?;
        let counts = (next.individuals().len(), next.images_of(&request.individual_id).len());
        *st.0.index.write().expect("index lock") = Arc::new(next);
        Ok((entry, counts.0, counts.1))
    })
    .await
    .map_err(|e| state.err(StatusCode::INTERNAL_SERVER_ERROR, ServiceError::Internal(e.to_string())))??;
    Ok(Json(json!({
        "config-hash": state.config_hash(),
        "entry": entry,
        "individual-count": individual_count,
        "image-count": image_count,
    })))
}

async fn health(State(state): State<AppState>) -> Json<Value> {
    Json(health_body(&state.snapshot(), state.config_hash()))
}

async fn config(State(state): State<AppState>) -> Json<Value> {
    Json(config_body(&state.0.pipeline.config))
}
