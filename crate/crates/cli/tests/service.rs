use std::sync::Arc;

use aublend_cli::service::{router, AppState, Snapshot, TIMING_HEADER};
use aublend_core::model::{CodebookModel, HyperParams, StyleBlendModel};
use aublend_core::synth::{generate_identity, synth_speech, StyleParams};
use aublend_core::{compose, compose_animated, AuActivation, IdentityBundle, OffsetSequence};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const V: usize = 75;

fn bundle(id: &str, seed: u64) -> IdentityBundle {
    let mut b = generate_identity(&StyleParams::from_seed(seed), V).unwrap();
    b.identity_id = id.into();
    b
}

fn models(trained: bool) -> (StyleBlendModel, CodebookModel) {
    let hp = HyperParams::tiny();
    let mut s = StyleBlendModel::new(hp.clone()).unwrap();
    s.trained = trained;
    (s, CodebookModel::new(hp).unwrap())
}

fn snapshot(with_models: bool) -> Snapshot {
    Snapshot::new(
        vec![(bundle("alice", 1), "train"), (bundle("bob", 2), "test")],
        vec![("speech_00".into(), synth_speech(V, 6, 30.0, 3).unwrap())],
        with_models.then(|| models(true)),
    )
    .unwrap()
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap()
    }
}

async fn call(state: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header(header::CONTENT_TYPE, "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, headers, bytes }
}

fn floats(v: &Value) -> Vec<f32> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap() as f32)
        .collect()
}

#[tokio::test]
async fn registry_endpoints_list_aus_and_presets() {
    let state = AppState::new(snapshot(false));
    let aus = call(&state, "GET", "/api/aus", None).await.json();
    assert_eq!(aus["aus"].as_array().unwrap().len(), 32);
    assert_eq!(aus["aus"][0]["id"], "AU1");
    let emotions = call(&state, "GET", "/api/emotions", None).await.json();
    let list = emotions["emotions"].as_array().unwrap();
    assert_eq!(list.len(), 7);
    assert!(list
        .iter()
        .any(|e| e["emotion"] == "happiness" && e["activations"]["AU12"] == 1.0));
    let ids = call(&state, "GET", "/api/identities", None).await.json();
    assert_eq!(ids["identities"][0]["id"], "alice");
    assert_eq!(ids["identities"][1]["split"], "test");
    assert_eq!(ids["speech"][0]["id"], "speech_00");
    assert_eq!(ids["model_loaded"], false);
}

#[tokio::test]
async fn template_and_unknown_identity() {
    let state = AppState::new(snapshot(false));
    let t = call(&state, "GET", "/api/identity/alice/template", None).await;
    assert_eq!(t.status, StatusCode::OK);
    let t = t.json();
    assert_eq!(t["vertex_count"], V);
    assert_eq!(floats(&t["vertices"]), bundle("alice", 1).template.positions());
    assert!(t["topology"].as_array().unwrap().len() > 0);
    assert_eq!(
        call(&state, "GET", "/api/identity/carol/template", None).await.status,
        StatusCode::NOT_FOUND
    );
    let c = call(&state, "POST", "/api/compose", Some(json!({ "identity_id": "carol" }))).await;
    assert_eq!(c.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn compose_is_pure_and_uncached() {
    let state = AppState::new(snapshot(false));
    let empty = call(
        &state,
        "POST",
        "/api/compose",
        Some(json!({ "identity_id": "alice", "activations": {} })),
    )
    .await;
    assert_eq!(empty.status, StatusCode::OK);
    assert_eq!(
        floats(&empty.json()["vertices"]),
        bundle("alice", 1).template.positions()
    );

    let req = json!({ "identity_id": "alice", "activations": { "AU12": 1.0, "6": 0.5 }, "include_topology": true });
    let a = call(&state, "POST", "/api/compose", Some(req.clone())).await;
    let b = call(&state, "POST", "/api/compose", Some(req)).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.bytes, b.bytes);
    assert_eq!(a.headers[header::CACHE_CONTROL], "no-store");
    assert!(a.headers[TIMING_HEADER].to_str().unwrap().parse::<u64>().is_ok());
    let alice = bundle("alice", 1);
    let want = compose(
        &alice.template,
        &alice.bases,
        &AuActivation::new().with(12, 1.0).with(6, 0.5),
    )
    .unwrap();
    let got = a.json();
    assert_eq!(floats(&got["vertices"]), want.positions());
    assert!(got["topology"].is_array());
}

#[tokio::test]
async fn invalid_activations_are_422_with_violations() {
    let state = AppState::new(snapshot(false));
    let r = call(
        &state,
        "POST",
        "/api/compose",
        Some(json!({ "identity_id": "alice", "activations": { "AU12": 1.2 } })),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let v = r.json();
    assert!(v["violations"][0].as_str().unwrap().contains("AU12"), "{v}");
    let r = call(
        &state,
        "POST",
        "/api/compose",
        Some(json!({ "identity_id": "alice", "activations": { "AU99": 0.2, "smile": 0.1 } })),
    )
    .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["violations"].as_array().unwrap().len(), 2);
    let r = call(&state, "POST", "/api/compose", Some(json!({ "activations": {} }))).await;
    assert!(r.status.is_client_error());
    assert!(r.json()["error"].is_string());
}

#[tokio::test]
async fn prediction_needs_a_model_and_runs_once() {
    let state = AppState::new(snapshot(false));
    let r = call(&state, "POST", "/api/identity/alice/predict", None).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
    let r = call(
        &state,
        "POST",
        "/api/compose",
        Some(json!({ "identity_id": "alice", "basis": "predicted" })),
    )
    .await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);

    state.reload(snapshot(true));
    let first = call(&state, "POST", "/api/identity/alice/predict", None).await.json();
    let second = call(&state, "POST", "/api/identity/alice/predict", None).await.json();
    assert_eq!(first["cached"], false);
    assert_eq!(second["cached"], true);
    assert_eq!(first["aus"], second["aus"]);
    assert_eq!(first["aus"].as_array().unwrap().len(), 32);
    assert_eq!(state.predictions(), 1);
    let c = call(
        &state,
        "POST",
        "/api/compose",
        Some(json!({ "identity_id": "alice", "activations": { "AU1": 1.0 }, "basis": "predicted" })),
    )
    .await;
    assert_eq!(c.status, StatusCode::OK);
    assert_eq!(state.predictions(), 1);
    assert_eq!(
        call(&state, "POST", "/api/identity/nobody/predict", None).await.status,
        StatusCode::NOT_FOUND
    );

    let untrained = Snapshot::new(vec![(bundle("alice", 1), "train")], vec![], Some(models(false))).unwrap();
    state.reload(untrained);
    let r = call(&state, "POST", "/api/identity/alice/predict", None).await;
    assert_eq!(r.status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn animate_adds_the_emotion_to_speech() {
    let state = AppState::new(snapshot(false));
    let req = |intensity: f64| json!({ "identity_id": "bob", "emotion": "happiness", "intensity": intensity, "speech_offsets_id": "speech_00" });
    let r = call(&state, "POST", "/api/animate", Some(req(0.0))).await;
    assert_eq!(r.status, StatusCode::OK);
    let v = r.json();
    assert_eq!(v["frame_count"], 6);
    assert_eq!(v["handle"].as_str().unwrap().len(), 16);
    let bob = bundle("bob", 2);
    let speech = synth_speech(V, 6, 30.0, 3).unwrap();
    let speech_only = compose_animated(&bob.template, &speech, &OffsetSequence::zeros(30.0, V, 1).unwrap()).unwrap();
    for (t, f) in speech_only.iter().enumerate() {
        assert_eq!(floats(&v["frames"][t]), f.positions());
    }
    let full = call(&state, "POST", "/api/animate", Some(req(1.0))).await.json();
    assert_ne!(full["frames"][0], v["frames"][0]);
    assert_ne!(full["handle"], v["handle"]);

    let r = call(&state, "POST", "/api/animate", Some(req(1.5))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let mut bad = req(1.0);
    bad["emotion"] = json!("glee");
    assert_eq!(
        call(&state, "POST", "/api/animate", Some(bad)).await.status,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let mut bad = req(1.0);
    bad["speech_offsets_id"] = json!("speech_09");
    assert_eq!(
        call(&state, "POST", "/api/animate", Some(bad)).await.status,
        StatusCode::NOT_FOUND
    );
}

#[tokio::test]
async fn reload_swaps_the_whole_snapshot() {
    let state = AppState::new(snapshot(false));
    let before = state.requests();
    let solo = Snapshot::new(vec![(bundle("carol", 9), "val")], vec![], None).unwrap();
    state.reload(solo);
    let ids = call(&state, "GET", "/api/identities", None).await.json();
    assert_eq!(ids["identities"].as_array().unwrap().len(), 1);
    assert_eq!(
        call(&state, "GET", "/api/identity/alice/template", None).await.status,
        StatusCode::NOT_FOUND
    );
    let health = call(&state, "GET", "/api/health", None).await.json();
    assert_eq!(health["requests"], before + 3);
}

#[test]
fn rejects_mismatched_models() {
    let mut hp = HyperParams::tiny();
    hp.vertex_count = 80;
    let pair = (
        StyleBlendModel::new(hp.clone()).unwrap(),
        CodebookModel::new(hp).unwrap(),
    );
    assert!(Snapshot::new(vec![(bundle("alice", 1), "train")], vec![], Some(pair)).is_err());
    assert!(Snapshot::new(vec![(bundle("a", 1), "train"), (bundle("a", 2), "train")], vec![], None).is_err());
}

#[tokio::test]
async fn serves_over_tcp() {
    let state = AppState::new(snapshot(false));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(aublend_cli::service::serve(listener, state));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream
        .write_all(b"GET /api/health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n")
        .await
        .unwrap();
    let mut text = String::new();
    stream.read_to_string(&mut text).await.unwrap();
    assert!(text.starts_with("HTTP/1.1 200"), "{text}");
    assert!(text.contains("\"status\":\"ok\""));
}
