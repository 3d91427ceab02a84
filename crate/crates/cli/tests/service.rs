use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use candle_core::DType;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use retroframe_cli::server::{router, AppState, LoadedModel};
use retroframe_core::checkpoint::{Bundle, ModelCard};
use retroframe_core::{ModelConfig, ParamStore, StoryTransformer, TokenizerConfig, Vocab, VqVae};

fn bundle(dir: &Path, with_card: bool) {
    let tokenizer = TokenizerConfig { image_size: 32, grid: 2, d_code: 4, codebook_size: 8, hidden: 8, beta: 0.25 };
    let model = ModelConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 1,
        v_text: 16,
        v_img: 8,
        n_text: 4,
        n_img: 4,
        retro_density: Some(1),
        prompt_len: 0,
        use_story: true,
        t_max: 3,
        d_sent: 8,
        ffn_mult: 2,
    };
    let card = with_card.then(|| ModelCard {
        name: "tiny".into(),
        model: model.clone(),
        tokenizer: tokenizer.clone(),
        dataset: "none".into(),
        seeds: BTreeMap::new(),
        metrics: BTreeMap::new(),
        notes: String::new(),
    });
    Bundle {
        vq: VqVae::new(tokenizer, Arc::new(ParamStore::new(DType::F32, 1))).unwrap(),
        model: StoryTransformer::new(model, Arc::new(ParamStore::new(DType::F32, 2))).unwrap(),
        vocab: Vocab::build(["a b c"]),
        card,
    }
    .save(dir)
    .unwrap();
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn get(path: &str) -> Request<Body> {
    Request::get(path).body(Body::empty()).unwrap()
}

fn post(body: Value) -> Request<Body> {
    Request::post("/api/generate").body(Body::from(body.to_string())).unwrap()
}

#[tokio::test]
async fn unavailable_until_a_model_is_installed() {
    let app = router(AppState::new());
    assert_eq!(call(&app, get("/api/health")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&app, get("/api/model-card")).await.0, StatusCode::SERVICE_UNAVAILABLE);
    let (status, _) = call(&app, post(json!({"captions": ["a", "b"], "source_image": ""}))).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn health_and_card() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), true);
    let app = router(AppState::with_model(LoadedModel::load(dir.path(), None).unwrap()));
    let (status, body) = call(&app, get("/api/health")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["model_id"].as_str().unwrap().starts_with("tiny@"));
    let (status, body) = call(&app, get("/api/model-card")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["name"], "tiny");
}

#[tokio::test]
async fn missing_card_is_404() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), false);
    let app = router(AppState::with_model(LoadedModel::load(dir.path(), None).unwrap()));
    assert_eq!(call(&app, get("/api/model-card")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn too_many_captions_is_413() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), true);
    let app = router(AppState::with_model(LoadedModel::load(dir.path(), None).unwrap()));
    let (status, body) = call(&app, post(json!({"captions": ["a", "b", "c", "a"], "source_image": ""}))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE, "{body}");
}

#[tokio::test]
async fn wrong_source_size_is_400() {
    let dir = tempfile::tempdir().unwrap();
    bundle(dir.path(), true);
    let app = router(AppState::with_model(LoadedModel::load(dir.path(), None).unwrap()));
    let png = retroframe_core::Frame::filled(16, 16, [0.5; 3]).to_png_bytes().unwrap();
    use base64::Engine;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    let (status, body) = call(&app, post(json!({"captions": ["a", "b"], "source_image": b64}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(body["error"].as_str().unwrap().contains("expected 32x32"));
}
