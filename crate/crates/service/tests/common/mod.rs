#![allow(dead_code)]

pub mod reference;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request};
use evicon_core::distinguishability::{ProjectionMethod, ScoreWeights};
use evicon_core::embedding::{EmbeddingConfig, EmbeddingModel};
use evicon_core::predictor::{PredictorConfig, PredictorModel};
use evicon_core::syngen::{default_prototypes, generate_icons};
use evicon_core::VectorIcon;
use evicon_service::engine::Settings;
use evicon_service::{App, Engine, Store};
use http_body_util::BodyExt;
use serde::Deserialize;
use serde_json::Value;
use tower::ServiceExt;

pub const DIM: usize = 8;

pub fn toy_embedding() -> EmbeddingModel {
    EmbeddingModel::new(&EmbeddingConfig {
        dim: DIM,
        resolution: 12,
        image_hidden: 16,
        token_dim: 8,
        text_hidden: 8,
        vocab_buckets: 64,
        seed: 11,
        ..Default::default()
    })
    .unwrap()
}

pub fn toy_predictor() -> PredictorModel {
    PredictorModel::new(
        DIM,
        &PredictorConfig {
            hidden: 16,
            trunk_layers: 2,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap()
}

/// Four synthetic tags (circle, cross, arrow, bars), six icons each.
pub fn toy_dataset() -> Vec<VectorIcon> {
    generate_icons(&default_prototypes(4), 6, 3).unwrap()
}

pub fn toy_settings() -> Settings {
    Settings {
        weights: ScoreWeights::default(),
        warning_threshold: 0.3,
        projection: ProjectionMethod::Pca2d,
        projection_seed: 0,
    }
}

pub fn toy_engine() -> Engine {
    Engine::new(toy_embedding(), toy_predictor(), toy_dataset(), toy_settings()).unwrap()
}

pub fn toy_app(store: Store) -> Arc<App> {
    Arc::new(App::new(Arc::new(toy_engine()), store))
}

#[derive(Debug, Clone, Deserialize)]
pub struct Fixture {
    pub method: String,
    pub path: String,
    #[serde(default)]
    pub body: Option<Value>,
    #[serde(default)]
    pub raw_body: Option<String>,
}

impl Fixture {
    pub fn body_bytes(&self) -> Vec<u8> {
        match (&self.body, &self.raw_body) {
            (Some(v), _) => serde_json::to_vec(v).unwrap(),
            (None, Some(raw)) => raw.as_bytes().to_vec(),
            (None, None) => Vec::new(),
        }
    }

    /// Substitutes `{setN}` with the id returned by the N-th successful create.
    pub fn uri(&self, set_ids: &[String]) -> String {
        let mut uri = self.path.clone();
        for (i, id) in set_ids.iter().enumerate() {
            uri = uri.replace(&format!("{{set{i}}}"), id);
        }
        uri
    }
}

pub fn fixtures() -> Vec<Fixture> {
    let text = include_str!("../fixtures/requests.json");
    serde_json::from_str(text).unwrap()
}

pub struct Reply {
    pub status: u16,
    pub bytes: Vec<u8>,
    pub json: Value,
}

pub async fn call(app: &Arc<App>, method: &str, uri: &str, body: Vec<u8>) -> Reply {
    let req = Request::builder()
        .method(Method::from_bytes(method.as_bytes()).unwrap())
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = evicon_service::http::router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status().as_u16();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    let json = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    Reply { status, bytes, json }
}

/// Plays every fixture in order, threading created set ids through.
pub async fn replay(app: &Arc<App>) -> Vec<(Fixture, String, Reply)> {
    let mut set_ids = Vec::new();
    let mut out = Vec::new();
    for f in fixtures() {
        let uri = f.uri(&set_ids);
        let reply = call(app, &f.method, &uri, f.body_bytes()).await;
        if f.method == "POST" && f.path == "/api/icon-sets" && reply.status == 200 {
            set_ids.push(reply.json["set_id"].as_str().unwrap().to_string());
        }
        out.push((f, uri, reply));
    }
    out
}

/// Replays the fixtures against a fresh app and lists every response that
/// differs from [`reference::Reference`].
pub async fn fixture_mismatches() -> Vec<String> {
    let app = toy_app(Store::in_memory());
    let mut reference = reference::Reference::new();
    let replies = replay(&app).await;
    let mut out = Vec::new();
    if replies.len() != 50 {
        out.push(format!("expected 50 fixtures, replayed {}", replies.len()));
    }
    for (i, (f, uri, reply)) in replies.iter().enumerate() {
        match reference.expected(&f.method, uri, &f.body_bytes()) {
            Ok(v) if reply.status != 200 || reply.json != v => {
                out.push(format!("fixture {i} {} {uri}: got {} {}", f.method, reply.status, reply.json));
            }
            Err((status, code)) if reply.status != status || reply.json["error"] != code => {
                out.push(format!("fixture {i} {} {uri}: want {status} {code}, got {} {}", f.method, reply.status, reply.json));
            }
            _ => {}
        }
    }
    out
}

/// Two replays, one in memory and one on disk, must agree byte for byte, and a
/// service restarted on the same directory must serve the stored sets as-is.
pub async fn replay_is_deterministic() -> Result<(), String> {
    let a = replay(&toy_app(Store::in_memory())).await;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let persisted = toy_app(Store::open(dir.path()).map_err(|e| e.to_string())?);
    let b = replay(&persisted).await;
    for ((f, uri, x), (_, _, y)) in a.iter().zip(&b) {
        if x.status != y.status || x.bytes != y.bytes {
            return Err(format!("{} {uri} differs between replays", f.method));
        }
    }
    let restarted = toy_app(Store::open(dir.path()).map_err(|e| e.to_string())?);
    if restarted.store.ids() != persisted.store.ids() {
        return Err("restarted store lists different sets".into());
    }
    for id in persisted.store.ids() {
        let uri = format!("/api/icon-sets/{id}");
        let x = call(&persisted, "GET", &uri, Vec::new()).await;
        let y = call(&restarted, "GET", &uri, Vec::new()).await;
        if x.bytes != y.bytes {
            return Err(format!("set {id} changed across restart"));
        }
    }
    Ok(())
}
