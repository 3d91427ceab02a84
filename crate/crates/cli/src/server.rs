//! HTTP front end for a trained story-continuation bundle.
//!
//! Handlers are concurrent; generation is not. Every accepted request is
//! handed to one worker thread that owns no state besides the shared,
//! read-only model, so requests for a model run strictly one at a time.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::future::IntoFuture;
use std::sync::{mpsc, Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use tokio::sync::oneshot;
use tower_http::cors::CorsLayer;

use retroframe_core::checkpoint::Bundle;
use retroframe_core::data::{DatasetFormat, LabelSet, Split, StorySample};
use retroframe_core::pipeline::generate_stories;
use retroframe_core::sampling::SamplerConfig;
use retroframe_core::{Dataset, Frame};

/// Decoding rows packed into one pass.
const GENERATE_BATCH: usize = 64;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateRequest {
    pub captions: Vec<String>,
    /// Base64 PNG of the source frame.
    #[serde(default)]
    pub source_image: Option<String>,
    /// Dataset story whose first frame is the source, when no image is sent.
    #[serde(default)]
    pub source_id: Option<String>,
    #[serde(default)]
    pub sampler: SamplerConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timings {
    pub queue_ms: f64,
    pub generate_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateResponse {
    /// Base64 PNGs, one per caption after the first.
    pub frames: Vec<String>,
    pub model_id: String,
    pub sampler: SamplerConfig,
    pub timings: Timings,
}

/// A bundle ready to serve.
pub struct LoadedModel {
    pub bundle: Bundle,
    pub model_id: String,
    pub config_digest: String,
    pub card: Option<Value>,
    pub sources: Option<Dataset>,
}

impl LoadedModel {
    /// Loads the bundle in `dir`, optionally with a dataset whose source
    /// frames can be referenced by story id.
    pub fn load(dir: &Path, sources: Option<&Path>) -> anyhow::Result<Self> {
        let bundle = Bundle::load(dir)?;
        let mut h = Sha256::new();
        for f in ["tokenizer.safetensors", "model.safetensors", "vocab.json"] {
            h.update(std::fs::read(dir.join(f))?);
        }
        let config_digest = hex::encode(h.finalize());
        let model_id = match &bundle.card {
            Some(c) => format!("{}@{}", c.name, &config_digest[..12]),
            None => format!("story-transformer@{}", &config_digest[..12]),
        };
        let card = bundle.card.as_ref().map(serde_json::to_value).transpose()?;
        let sources = sources
            .map(|root| -> anyhow::Result<Dataset> {
                let format = retroframe_core::data::read_manifest(root)?.map(|m| m.format).unwrap_or(DatasetFormat::Generic);
                Ok(retroframe_core::data::load_dataset(root, format)?)
            })
            .transpose()?;
        Ok(Self { bundle, model_id, config_digest, card, sources })
    }

    fn image_size(&self) -> usize {
        self.bundle.vq.config().image_size
    }
}

struct Job {
    model: Arc<LoadedModel>,
    sample: StorySample,
    sampler: SamplerConfig,
    enqueued: Instant,
    reply: oneshot::Sender<anyhow::Result<(Vec<Vec<u8>>, Timings)>>,
}

pub struct AppState {
    model: RwLock<Option<Arc<LoadedModel>>>,
    jobs: std::sync::Mutex<mpsc::Sender<Job>>,
}

impl AppState {
    /// New state with no model and a running generation worker.
    pub fn new() -> Arc<Self> {
        let (tx, rx) = mpsc::channel::<Job>();
        std::thread::Builder::new()
            .name("generation-worker".into())
            .spawn(move || {
                for job in rx {
                    let started = Instant::now();
                    let queue_ms = started.duration_since(job.enqueued).as_secs_f64() * 1e3;
                    let result = run_job(&job).map(|frames| {
                        (frames, Timings { queue_ms, generate_ms: started.elapsed().as_secs_f64() * 1e3 })
                    });
                    let _ = job.reply.send(result);
                }
            })
            .expect("spawn generation worker");
        Arc::new(Self { model: RwLock::new(None), jobs: std::sync::Mutex::new(tx) })
    }

    pub fn with_model(model: LoadedModel) -> Arc<Self> {
        let s = Self::new();
        s.install(model);
        s
    }

    pub fn install(&self, model: LoadedModel) {
        *self.model.write().unwrap() = Some(Arc::new(model));
    }

    pub fn current(&self) -> Option<Arc<LoadedModel>> {
        self.model.read().unwrap().clone()
    }
}

fn run_job(job: &Job) -> anyhow::Result<Vec<Vec<u8>>> {
    let b = &job.model.bundle;
    let generated = generate_stories(&b.model, &b.vq, &b.vocab, &[&job.sample], &job.sampler, GENERATE_BATCH)?;
    generated[0].frames.iter().map(|f| Ok(f.to_png_bytes()?)).collect()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/generate", post(generate))
        .route("/api/health", get(health))
        .route("/api/model-card", get(model_card))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.current() {
        Some(m) => Json(json!({
            "status": "ok",
            "model_id": m.model_id,
            "config_digest": m.config_digest,
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

async fn model_card(State(state): State<Arc<AppState>>) -> Response {
    let Some(m) = state.current() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded");
    };
    match &m.card {
        Some(card) => Json(card.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "checkpoint has no model card"),
    }
}

fn source_frame(m: &LoadedModel, req: &GenerateRequest) -> Result<Frame, Response> {
    let size = m.image_size();
    if let Some(b64) = &req.source_image {
        let bytes = B64.decode(b64.trim()).map_err(|e| error(StatusCode::BAD_REQUEST, format!("source_image is not base64: {e}")))?;
        let frame =
            Frame::from_png_bytes(&bytes).map_err(|e| error(StatusCode::BAD_REQUEST, format!("source_image is not a PNG: {e}")))?;
        if frame.height != size || frame.width != size {
            return Err(error(
                StatusCode::BAD_REQUEST,
                format!("source_image is {}x{}, expected {size}x{size}", frame.width, frame.height),
            ));
        }
        return Ok(frame);
    }
    if let Some(id) = &req.source_id {
        let Some(ds) = &m.sources else {
            return Err(error(StatusCode::BAD_REQUEST, "source_id given but the service has no dataset loaded"));
        };
        return match ds.get(id) {
            Some(s) => Ok(s.source().clone()),
            None => Err(error(StatusCode::BAD_REQUEST, format!("unknown source_id {id:?}"))),
        };
    }
    Err(error(StatusCode::BAD_REQUEST, "one of source_image or source_id is required"))
}

async fn generate(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: GenerateRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let Some(m) = state.current() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "model not loaded");
    };
    let t_max = m.bundle.model.config().t_max;
    if req.captions.len() < 2 {
        return error(StatusCode::BAD_REQUEST, format!("at least 2 captions required, got {}", req.captions.len()));
    }
    if req.captions.len() > t_max {
        return error(StatusCode::PAYLOAD_TOO_LARGE, format!("at most {t_max} captions accepted, got {}", req.captions.len()));
    }
    if !(req.sampler.temperature.is_finite()) {
        return error(StatusCode::BAD_REQUEST, "sampler.temperature must be finite");
    }
    let source = match source_frame(&m, &req) {
        Ok(f) => f,
        Err(r) => return r,
    };
    let t = req.captions.len();
    let sample = match StorySample::new("request", Split::Test, req.captions.clone(), vec![source; t], vec![LabelSet::new(); t]) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    let (tx, rx) = oneshot::channel();
    let job = Job { model: m.clone(), sample, sampler: req.sampler, enqueued: Instant::now(), reply: tx };
    if state.jobs.lock().unwrap().send(job).is_err() {
        return error(StatusCode::SERVICE_UNAVAILABLE, "generation worker stopped");
    }
    match rx.await {
        Ok(Ok((pngs, timings))) => Json(GenerateResponse {
            frames: pngs.iter().map(|p| B64.encode(p)).collect(),
            model_id: m.model_id.clone(),
            sampler: req.sampler,
            timings,
        })
        .into_response(),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("generation failed: {e}")),
        Err(_) => error(StatusCode::SERVICE_UNAVAILABLE, "generation worker stopped"),
    }
}

/// Binds `port`, answers 503 until the bundle in `checkpoint` is loaded,
/// then serves until interrupted.
pub async fn serve(checkpoint: PathBuf, port: u16, sources: Option<PathBuf>) -> anyhow::Result<()> {
    let state = AppState::new();
    let addr = SocketAddr::from(([0, 0, 0, 0], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {addr}");
    let loader = state.clone();
    let load = tokio::task::spawn_blocking(move || -> anyhow::Result<()> {
        let m = LoadedModel::load(&checkpoint, sources.as_deref())?;
        log::info!("loaded {} ({})", m.model_id, checkpoint.display());
        loader.install(m);
        Ok(())
    });
    let server = tokio::spawn(
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .into_future(),
    );
    load.await?.map_err(|e| e.context("loading checkpoint"))?;
    server.await??;
    Ok(())
}
