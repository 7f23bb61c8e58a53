mod common;

use std::time::Instant;

use common::*;
use evicon_service::Store;
use serde_json::json;

#[tokio::test]
async fn every_fixture_matches_library_calls() {
    let mismatches = fixture_mismatches().await;
    assert!(mismatches.is_empty(), "{}", mismatches.join("\n"));
}

#[tokio::test]
async fn replay_from_empty_store_is_deterministic() {
    replay_is_deterministic().await.unwrap();
}

#[tokio::test]
async fn unknown_set_is_404() {
    let app = toy_app(Store::in_memory());
    let r = call(&app, "GET", "/api/icon-sets/nope", Vec::new()).await;
    assert_eq!(r.status, 404);
    assert_eq!(r.json["error"], "set_not_found");
}

#[tokio::test]
async fn predict_returns_two_distributions() {
    let app = toy_app(Store::in_memory());
    let icon = &toy_dataset()[0];
    let started = Instant::now();
    let r = call(&app, "POST", "/api/predict", serde_json::to_vec(&json!({ "icon": icon })).unwrap()).await;
    assert!(started.elapsed().as_millis() < 200);
    assert_eq!(r.status, 200);
    for head in ["semantic_distance", "familiarity"] {
        let v: Vec<f64> = serde_json::from_value(r.json[head].clone()).unwrap();
        assert_eq!(v.len(), 5);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[tokio::test]
async fn edit_never_serves_stale_cache() {
    let app = toy_app(Store::in_memory());
    let icons = toy_dataset()[..3].to_vec();
    let created = call(&app, "POST", "/api/icon-sets", serde_json::to_vec(&json!({ "icons": icons })).unwrap()).await;
    let id = created.json["set_id"].as_str().unwrap().to_string();
    let before = call(&app, "GET", &format!("/api/icon-sets/{id}"), Vec::new()).await;
    let edit = json!({ "strokes": icons[1].strokes(), "tags": ["arrow"] });
    let uri = format!("/api/icon-sets/{id}/icons/{}", icons[0].id);
    let put = call(&app, "PUT", &uri, serde_json::to_vec(&edit).unwrap()).await;
    assert_eq!(put.status, 200);
    let after = call(&app, "GET", &format!("/api/icon-sets/{id}"), Vec::new()).await;
    let key = &icons[0].id;
    assert_ne!(after.json["predictions"][key], before.json["predictions"][key]);
    let general = &put.json["prediction"]["general"];
    assert_eq!(after.json["predictions"][key]["semantic_distance"], general["semantic_distance"]);
    assert_eq!(after.json["revision"], 1);
}

#[tokio::test]
async fn edit_moves_graph_consistently() {
    let app = toy_app(Store::in_memory());
    let engine = toy_engine();
    let mut icons = toy_dataset()[..4].to_vec();
    let created = call(&app, "POST", "/api/icon-sets", serde_json::to_vec(&json!({ "icons": icons })).unwrap()).await;
    let id = created.json["set_id"].as_str().unwrap().to_string();
    let edit = json!({ "strokes": icons[3].strokes() });
    call(&app, "PUT", &format!("/api/icon-sets/{id}/icons/{}", icons[0].id), serde_json::to_vec(&edit).unwrap()).await;
    icons[0] = icons[0].with_strokes(icons[3].strokes().to_vec());
    let graph = call(&app, "GET", &format!("/api/icon-sets/{id}/graph?threshold=0.01"), Vec::new()).await;
    assert_eq!(graph.json, json!(engine.graph(&icons, 0.01).unwrap()));
    // Same strokes, same embedding: the edited icon now duplicates icons[3].
    let dup = graph.json["edges"]
        .as_array()
        .unwrap()
        .iter()
        .find(|e| e["a"] == icons[0].id.as_str() && e["b"] == icons[3].id.as_str())
        .unwrap();
    assert_eq!(dup["warning"], true);
}

#[tokio::test]
async fn concurrent_edits_to_one_set_serialize() {
    let app = toy_app(Store::in_memory());
    let icons = toy_dataset()[..2].to_vec();
    let created = call(&app, "POST", "/api/icon-sets", serde_json::to_vec(&json!({ "icons": icons })).unwrap()).await;
    let id = created.json["set_id"].as_str().unwrap().to_string();
    let mut tasks = Vec::new();
    for i in 0..8 {
        let app = app.clone();
        let uri = format!("/api/icon-sets/{id}/icons/{}", icons[i % 2].id);
        let body = serde_json::to_vec(&json!({ "strokes": icons[(i + 1) % 2].strokes() })).unwrap();
        tasks.push(tokio::spawn(async move { call(&app, "PUT", &uri, body).await.status }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), 200);
    }
    let got = call(&app, "GET", &format!("/api/icon-sets/{id}"), Vec::new()).await;
    assert_eq!(got.json["revision"], 8);
}
