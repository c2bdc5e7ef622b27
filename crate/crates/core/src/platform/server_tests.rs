use super::server::{api_description, router, AppState};
use super::wire::{image_to_base64, RunLength};
use super::{Config, ConceptStore};
use crate::testutil::{tiny_base, tiny_concept, tiny_synth};
use crate::trainer::AblationFlags;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use std::time::Duration;
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    state: AppState,
    image: String,
    strokes: Value,
}

fn fixture() -> Fixture {
    let b = tiny_base(0);
    let dir = tempfile::tempdir().unwrap();
    let store = ConceptStore::open(dir.path()).unwrap();
    let sc = tiny_synth("toy-red", "toy", 30.0, 1);
    store.save_concept(&tiny_concept(&b, &sc, AblationFlags::default())).unwrap();
    let mut cfg = Config::default();
    cfg.sampling.steps = 2;
    cfg.stage1.steps = 1;
    cfg.stage2.steps = 1;
    cfg.server.workers = 1;
    cfg.paths.out = dir.path().join("out");
    let image = image_to_base64(&sc.pairs[0].pair.image).unwrap();
    let strokes = serde_json::to_value(&sc.pairs[0].strokes).unwrap();
    Fixture { state: AppState::new(b, store, cfg), image, strokes, _dir: dir }
}

async fn call(st: &AppState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = router(st.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

async fn wait(st: &AppState, id: &str) -> Value {
    let mut seen = Vec::new();
    for _ in 0..2000 {
        let (code, v) = call(st, "GET", &format!("/jobs/{id}"), None).await;
        assert_eq!(code, StatusCode::OK);
        let s = v["status"].as_str().unwrap().to_string();
        if seen.last() != Some(&s) {
            seen.push(s.clone());
        }
        if s == "done" || s == "failed" {
            let order = ["queued", "running", "done", "failed"];
            let ranks: Vec<usize> = seen.iter().map(|s| order.iter().position(|o| o == s).unwrap()).collect();
            assert!(ranks.windows(2).all(|w| w[0] < w[1]), "status went {seen:?}");
            return v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("job {id} never finished");
}

#[tokio::test]
async fn health_concepts_and_openapi() {
    let f = fixture();
    let (code, v) = call(&f.state, "GET", "/health", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["base_hash"].as_str().unwrap().len(), 64);
    let (code, v) = call(&f.state, "GET", "/concepts", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v[0]["concept_id"], "toy-red");
    let (code, v) = call(&f.state, "GET", "/openapi.json", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v, api_description());
    for p in ["/health", "/concepts", "/jobs", "/jobs/{id}", "/jobs/{id}/result", "/sketch/echo"] {
        assert!(v["paths"].get(p).is_some(), "{p} undocumented");
    }
    assert_eq!(call(&f.state, "GET", "/nope", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn generate_job_runs_and_echoes_request() {
    let f = fixture();
    let req = json!({ "kind": "generate", "payload": { "concept": "toy-red", "strokes": f.strokes, "prompt": "a photo of [v]", "steps": 2, "seed": 3 } });
    let (code, v) = call(&f.state, "POST", "/jobs", Some(req.clone())).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let id = v["id"].as_str().unwrap().to_string();
    let info = wait(&f.state, &id).await;
    assert_eq!(info["status"], "done", "{info}");
    assert_eq!(info["request"], req);
    let (code, r) = call(&f.state, "GET", &format!("/jobs/{id}/result"), None).await;
    assert_eq!(code, StatusCode::OK);
    let img = super::wire::image_from_base64(r["image"].as_str().unwrap()).unwrap();
    assert_eq!(img.width(), 32);
    assert_eq!(r["record"]["seed"], 3);

    // Same request, same pixels.
    let (_, v2) = call(&f.state, "POST", "/jobs", Some(req)).await;
    let id2 = v2["id"].as_str().unwrap().to_string();
    assert_ne!(id, id2);
    wait(&f.state, &id2).await;
    let (_, r2) = call(&f.state, "GET", &format!("/jobs/{id2}/result"), None).await;
    assert_eq!(r["image"], r2["image"]);
}

#[tokio::test]
async fn edit_job_with_blend_mask() {
    let f = fixture();
    let mut m = crate::sketchrep::Raster::new(32, 32);
    for y in 8..20 {
        for x in 8..20 {
            m.set(x, y, 1.0);
        }
    }
    let req = json!({ "kind": "edit", "payload": {
        "concept": "toy-red", "image": f.image, "strokes": f.strokes, "blend_mask": RunLength::encode(&m), "prompt": "a photo of [v]", "steps": 2 } });
    let (code, v) = call(&f.state, "POST", "/jobs", Some(req)).await;
    assert_eq!(code, StatusCode::ACCEPTED, "{v}");
    let info = wait(&f.state, v["id"].as_str().unwrap()).await;
    assert_eq!(info["status"], "done", "{info}");
}

#[tokio::test]
async fn schema_errors_are_400_and_unknowns_404() {
    let f = fixture();
    let st = &f.state;
    let bad = [
        json!({ "kind": "paint" }),
        json!({ "kind": "generate", "payload": { "concept": "toy-red" } }),
        json!({ "kind": "generate", "payload": { "concept": "toy-red", "strokes": f.strokes, "prompt": "a photo of a toy" } }),
        json!({ "kind": "generate", "payload": { "concept": "toy-red", "strokes": f.strokes, "prompt": "a photo of [v] zebra" } }),
        json!({ "kind": "generate", "payload": { "concept": "toy-red", "strokes": [{ "kind": "contour", "width": 1, "points": [[0.1, 0.1]] }], "prompt": "a photo of [v]" } }),
        json!({ "kind": "generate", "payload": { "concept": "toy-red", "strokes": f.strokes, "prompt": "a photo of [v]", "extra": 1 } }),
        json!({ "kind": "edit", "payload": { "concept": "toy-red", "image": "!!", "strokes": f.strokes, "prompt": "a photo of [v]" } }),
        json!({ "kind": "train_concept", "payload": { "concept_id": "x", "class_name": "toy", "pairs": [] } }),
        json!({ "kind": "benchmark", "payload": { "manifest": "m", "variants": "full,warp_drive" } }),
        json!({ "kind": "generate", "payload": [1, 2] }),
    ];
    for b in bad {
        let (code, v) = call(st, "POST", "/jobs", Some(b.clone())).await;
        assert_eq!(code, StatusCode::BAD_REQUEST, "{b} gave {v}");
        assert!(v["error"].is_string());
    }
    let req = Request::builder().method("POST").uri("/jobs").body(Body::from("{not json")).unwrap();
    assert_eq!(router(st.clone()).oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);

    let missing = json!({ "kind": "generate", "payload": { "concept": "ghost", "strokes": f.strokes, "prompt": "a photo of [v]" } });
    assert_eq!(call(st, "POST", "/jobs", Some(missing)).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(st, "GET", "/jobs/job-999999", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(st, "GET", "/jobs/job-999999/result", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(st, "GET", "/jobs", None).await.1, json!([]));
}

#[tokio::test]
async fn concurrent_training_of_one_concept_conflicts() {
    let f = fixture();
    let req = json!({ "kind": "train_concept", "payload": {
        "concept_id": "toy-new", "class_name": "toy", "pairs": [{ "image": f.image, "strokes": f.strokes }] } });
    let (code, v) = call(&f.state, "POST", "/jobs", Some(req.clone())).await;
    assert_eq!(code, StatusCode::ACCEPTED);
    let (code2, _) = call(&f.state, "POST", "/jobs", Some(req.clone())).await;
    assert_eq!(code2, StatusCode::CONFLICT);
    let info = wait(&f.state, v["id"].as_str().unwrap()).await;
    assert_eq!(info["status"], "done", "{info}");
    let (_, list) = call(&f.state, "GET", "/concepts", None).await;
    assert!(list.as_array().unwrap().iter().any(|c| c["concept_id"] == "toy-new"));
    // The lock is released once the job ends.
    let (code3, v3) = call(&f.state, "POST", "/jobs", Some(req)).await;
    assert_eq!(code3, StatusCode::ACCEPTED);
    wait(&f.state, v3["id"].as_str().unwrap()).await;
}

#[tokio::test]
async fn sketch_echo_splits_channels() {
    let f = fixture();
    let body = json!({ "size": 32, "strokes": [
        { "kind": "contour", "width": 2, "points": [[0.2, 0.2], [0.8, 0.2], [0.8, 0.8], [0.2, 0.8], [0.2, 0.2]] },
        { "kind": "detail", "width": 1, "points": [[0.3, 0.5], [0.7, 0.5]] }
    ] });
    let (code, v) = call(&f.state, "POST", "/sketch/echo", Some(body)).await;
    assert_eq!(code, StatusCode::OK);
    assert!(v["contour_ink"].as_u64().unwrap() > 40);
    assert!(v["detail_ink"].as_u64().unwrap() > 5);
    let s_d: RunLength = serde_json::from_value(v["s_d"].clone()).unwrap();
    let r = s_d.decode().unwrap();
    assert_eq!(r.count_on() as u64, v["detail_ink"].as_u64().unwrap());
    assert!(r.get(16, 16) > 0.5 || r.get(16, 15) > 0.5);
    let m: RunLength = serde_json::from_value(v["auto_mask"].clone()).unwrap();
    let m = m.decode().unwrap();
    assert!(m.get(16, 16) > 0.5 && m.get(1, 1) < 0.5);

    let (code, v) = call(&f.state, "POST", "/sketch/echo", Some(json!({ "strokes": [] }))).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(v["contour_ink"], 0);
    assert!(v["auto_mask"].is_null() && v["auto_mask_error"].is_string());
    let (code, _) = call(&f.state, "POST", "/sketch/echo", Some(json!({ "strokes": [{ "kind": "blob" }] }))).await;
    assert_eq!(code, StatusCode::BAD_REQUEST);
}
