//! HTTP contract of the demo service, exercised in-process.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::Engine;
use candle_core::DType;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use retroframe_cli::server::{router, AppState, LoadedModel};
use retroframe_core::checkpoint::{Bundle, ModelCard};
use retroframe_core::{Frame, ModelConfig, ParamStore, StoryTransformer, TokenizerConfig, Vocab, VqVae};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Small untrained bundle; its output depends only on the seeds below.
pub fn tiny_bundle(dir: &Path) {
    let request: Value = serde_json::from_str(&std::fs::read_to_string(fixtures().join("generate_request.json")).unwrap()).unwrap();
    let captions: Vec<&str> = request["captions"].as_array().unwrap().iter().map(|c| c.as_str().unwrap()).collect();
    let vocab = Vocab::build(captions.iter().copied());
    let tokenizer = TokenizerConfig { image_size: 64, grid: 4, d_code: 8, codebook_size: 32, hidden: 32, beta: 0.25 };
    let model = ModelConfig {
        d_model: 32,
        n_heads: 4,
        n_blocks: 3,
        v_text: 32,
        v_img: tokenizer.codebook_size,
        n_text: 12,
        n_img: tokenizer.n_tokens(),
        retro_density: Some(3),
        prompt_len: 0,
        use_story: true,
        t_max: 8,
        d_sent: 16,
        ffn_mult: 4,
    };
    let vq = VqVae::new(tokenizer.clone(), Arc::new(ParamStore::new(DType::F32, 11))).unwrap();
    let st = StoryTransformer::new(model.clone(), Arc::new(ParamStore::new(DType::F32, 12))).unwrap();
    let card = ModelCard {
        name: "fixture-model".into(),
        model,
        tokenizer,
        dataset: "fixture".into(),
        seeds: BTreeMap::from([("tokenizer".into(), 11), ("model".into(), 12)]),
        metrics: BTreeMap::new(),
        notes: "untrained; used only to exercise the HTTP contract".into(),
    };
    Bundle { vq, model: st, vocab, card: Some(card) }.save(dir).unwrap();
}

async fn post(app: &axum::Router, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::post("/api/generate").header("content-type", "application/json").body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

pub struct ServiceCheck {
    pub failures: Vec<String>,
    pub frames: usize,
    pub malformed_checked: usize,
}

pub fn contract(dir: &Path) -> ServiceCheck {
    tiny_bundle(dir);
    let state = AppState::with_model(LoadedModel::load(dir, None).unwrap());
    let app = router(state);
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
    rt.block_on(async {
        let mut failures = Vec::new();
        let request = std::fs::read(fixtures().join("generate_request.json")).unwrap();
        let golden: Value =
            serde_json::from_str(&std::fs::read_to_string(fixtures().join("generate_response.json")).unwrap()).unwrap();

        let (s1, r1) = post(&app, request.clone()).await;
        let (s2, r2) = post(&app, request.clone()).await;
        if s1.as_u16() as u64 != golden["status"].as_u64().unwrap() || s2 != s1 {
            failures.push(format!("status {s1} / {s2}, body {r1}"));
        }
        let frames = |r: &Value| -> Vec<Vec<u8>> {
            r["frames"]
                .as_array()
                .map(|a| {
                    a.iter()
                        .map(|f| base64::engine::general_purpose::STANDARD.decode(f.as_str().unwrap()).unwrap())
                        .collect()
                })
                .unwrap_or_default()
        };
        let (f1, f2) = (frames(&r1), frames(&r2));
        if f1.len() as u64 != golden["frames"].as_u64().unwrap() {
            failures.push(format!("{} frames returned, expected {}", f1.len(), golden["frames"]));
        }
        for (i, png) in f1.iter().enumerate() {
            match Frame::from_png_bytes(png) {
                Ok(f) if f.width as u64 == golden["frame_width"].as_u64().unwrap()
                    && f.height as u64 == golden["frame_height"].as_u64().unwrap() => {}
                Ok(f) => failures.push(format!("frame {i} is {}x{}", f.width, f.height)),
                Err(e) => failures.push(format!("frame {i} is not a PNG: {e}")),
            }
        }
        if f1 != f2 {
            failures.push("same seed produced different PNG bytes".into());
        }
        if r1["sampler"] != golden["sampler"] {
            failures.push(format!("sampler echoed as {}", r1["sampler"]));
        }
        if !r1["model_id"].as_str().unwrap_or("").starts_with(golden["model_id_prefix"].as_str().unwrap()) {
            failures.push(format!("model_id {}", r1["model_id"]));
        }

        // A different seed must actually change the sample, or the
        // determinism check above proves nothing.
        let mut other: Value = serde_json::from_slice(&request).unwrap();
        other["sampler"]["seed"] = Value::from(99);
        let (_, r3) = post(&app, serde_json::to_vec(&other).unwrap()).await;
        if frames(&r3) == f1 {
            failures.push("a different seed reproduced the same frames".into());
        }

        let mut malformed_checked = 0;
        let mut entries: Vec<_> = std::fs::read_dir(fixtures().join("malformed")).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            let (status, body) = post(&app, std::fs::read(&path).unwrap()).await;
            malformed_checked += 1;
            if status != StatusCode::BAD_REQUEST || body["error"].as_str().is_none() {
                failures.push(format!("{}: {status} {body}", path.file_name().unwrap().to_string_lossy()));
            }
        }
        ServiceCheck { failures, frames: f1.len(), malformed_checked }
    })
}
