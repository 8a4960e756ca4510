//! JSON-over-HTTP access to composition and prediction.
//!
//! Handlers read an immutable [`Snapshot`]; a reload swaps the whole
//! snapshot, so a request sees either the old one or the new one.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, RwLock};
use std::time::Instant;

use aublend_core::dataset::Dataset;
use aublend_core::io::sha256_hex;
use aublend_core::metrics::animate;
use aublend_core::model::{predict_basis, CodebookModel, StyleBlendModel};
use aublend_core::{compose, AuActivation, AuBases, AuId, Emotion, FacsRegistry, IdentityBundle, OffsetSequence};
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{CliError, CliResult};

/// Microseconds spent composing, excluding serialisation.
pub const TIMING_HEADER: &str = "x-compose-micros";

struct Served {
    bundle: IdentityBundle,
    split: &'static str,
    predicted: OnceLock<Result<Arc<AuBases>, String>>,
}

/// Everything a request may read. Never mutated once built, apart from the
/// per-identity prediction cache, whose entries are written once.
pub struct Snapshot {
    registry: &'static FacsRegistry,
    models: Option<(StyleBlendModel, CodebookModel)>,
    identities: BTreeMap<String, Served>,
    speech: BTreeMap<String, OffsetSequence>,
}

impl Snapshot {
    /// Validates every bundle and the model's vertex count.
    pub fn new(
        bundles: Vec<(IdentityBundle, &'static str)>,
        speech: Vec<(String, OffsetSequence)>,
        models: Option<(StyleBlendModel, CodebookModel)>,
    ) -> CliResult<Self> {
        let registry = FacsRegistry::standard();
        let mut identities = BTreeMap::new();
        for (bundle, split) in bundles {
            bundle.validate(registry)?;
            if let Some((s, _)) = &models {
                if s.hp.vertex_count != bundle.vertex_count() {
                    return Err(CliError::data(format!(
                        "model expects {} vertices, `{}` has {}",
                        s.hp.vertex_count,
                        bundle.identity_id,
                        bundle.vertex_count()
                    )));
                }
            }
            let id = bundle.identity_id.clone();
            let served = Served {
                bundle,
                split,
                predicted: OnceLock::new(),
            };
            if identities.insert(id.clone(), served).is_some() {
                return Err(CliError::data(format!("identity `{id}` appears twice")));
            }
        }
        Ok(Self {
            registry,
            models,
            identities,
            speech: speech.into_iter().collect(),
        })
    }

    pub fn from_dataset(ds: Dataset, models: Option<(StyleBlendModel, CodebookModel)>) -> CliResult<Self> {
        let split = &ds.manifest.split;
        let which = |id: &str| -> &'static str {
            if split.train.iter().any(|s| s == id) {
                "train"
            } else if split.val.iter().any(|s| s == id) {
                "val"
            } else if split.test.iter().any(|s| s == id) {
                "test"
            } else {
                "none"
            }
        };
        let tagged: Vec<(IdentityBundle, &'static str)> =
            ds.bundles.iter().map(|b| (b.clone(), which(&b.identity_id))).collect();
        let speech = ds
            .manifest
            .speech
            .iter()
            .zip(ds.speech)
            .map(|(e, seq)| {
                let id = std::path::Path::new(&e.file)
                    .file_stem()
                    .map_or_else(|| e.file.clone(), |s| s.to_string_lossy().into_owned());
                (id, seq)
            })
            .collect();
        Self::new(tagged, speech, models)
    }
}

pub struct AppState {
    snapshot: RwLock<Arc<Snapshot>>,
    requests: AtomicU64,
    predictions: AtomicU64,
}

impl AppState {
    pub fn new(snapshot: Snapshot) -> Arc<Self> {
        Arc::new(Self {
            snapshot: RwLock::new(Arc::new(snapshot)),
            requests: AtomicU64::new(0),
            predictions: AtomicU64::new(0),
        })
    }

    /// Replaces models and bundles in one step.
    pub fn reload(&self, snapshot: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(snapshot);
    }

    pub fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Requests handled so far.
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Times the style model actually ran.
    pub fn predictions(&self) -> u64 {
        self.predictions.load(Ordering::Relaxed)
    }

    fn enter(&self) -> Arc<Snapshot> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.current()
    }
}

// ------------------------------------------------------------------ errors

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Invalid { message: String, violations: Vec<String> },
    BadBody { status: StatusCode, message: String },
    Unavailable(String),
    Internal(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, json!({ "error": m })),
            ApiError::Invalid { message, violations } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                json!({ "error": message, "violations": violations }),
            ),
            ApiError::BadBody { status, message } => (status, json!({ "error": message })),
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, json!({ "error": m })),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, json!({ "error": m })),
        };
        (status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::BadBody {
            status: r.status(),
            message: r.body_text(),
        }
    }
}

impl From<aublend_core::Error> for ApiError {
    fn from(e: aublend_core::Error) -> Self {
        match e {
            aublend_core::Error::Validation(report) => ApiError::Invalid {
                message: "invalid activation".into(),
                violations: report.violations.iter().map(ToString::to_string).collect(),
            },
            aublend_core::Error::UnknownEmotion { .. } => ApiError::Invalid {
                message: e.to_string(),
                violations: Vec::new(),
            },
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn served<'a>(snap: &'a Snapshot, id: &str) -> ApiResult<&'a Served> {
    snap.identities
        .get(id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown identity `{id}`")))
}

/// Predicted bases, computed on first use.
fn predicted(state: &AppState, snap: &Snapshot, s: &Served) -> ApiResult<(Arc<AuBases>, bool)> {
    let Some((style, codebook)) = &snap.models else {
        return Err(ApiError::Unavailable("no model is loaded".into()));
    };
    if !style.trained {
        return Err(ApiError::Unavailable("the loaded style model is untrained".into()));
    }
    let mut fresh = false;
    let result = s.predicted.get_or_init(|| {
        fresh = true;
        state.predictions.fetch_add(1, Ordering::Relaxed);
        predict_basis(style, codebook, &s.bundle.template, false)
            .map(|p| Arc::new(p.bases))
            .map_err(|e| e.to_string())
    });
    match result {
        Ok(b) => Ok((b.clone(), !fresh)),
        Err(m) => Err(ApiError::Internal(m.clone())),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisChoice {
    /// The identity's own bases.
    #[default]
    Bundle,
    /// Bases predicted from the template by the loaded model.
    Predicted,
}

fn bases_for(state: &AppState, snap: &Snapshot, s: &Served, choice: BasisChoice) -> ApiResult<Arc<AuBases>> {
    match choice {
        BasisChoice::Bundle => Ok(Arc::new(s.bundle.bases.clone())),
        BasisChoice::Predicted => predicted(state, snap, s).map(|(b, _)| b),
    }
}

fn parse_activation(registry: &FacsRegistry, map: &BTreeMap<String, f32>) -> ApiResult<AuActivation> {
    let mut act = AuActivation::new();
    let mut bad = Vec::new();
    for (k, &w) in map {
        match k.parse::<AuId>() {
            Ok(au) => act.set(au, w),
            Err(_) => bad.push(format!("`{k}` is not an AU identifier")),
        }
    }
    if let Err(report) = registry.validate_activation(&act) {
        bad.extend(report.violations.iter().map(ToString::to_string));
    }
    if bad.is_empty() {
        Ok(act)
    } else {
        Err(ApiError::Invalid {
            message: "invalid activation".into(),
            violations: bad,
        })
    }
}

// ---------------------------------------------------------------- handlers

#[derive(Serialize)]
struct AuEntry<'a> {
    id: String,
    number: u16,
    name: &'a str,
    region: aublend_core::facs::Region,
}

async fn list_aus(State(state): State<Arc<AppState>>) -> Response {
    let snap = state.enter();
    let aus: Vec<AuEntry> = snap
        .registry
        .list_aus()
        .iter()
        .map(|d| AuEntry {
            id: d.id.to_string(),
            number: d.id.0,
            name: &d.name,
            region: d.region,
        })
        .collect();
    Json(json!({ "aus": aus })).into_response()
}

fn activation_json(a: &AuActivation) -> BTreeMap<String, f32> {
    a.iter().map(|(au, w)| (au.to_string(), w)).collect()
}

async fn list_emotions(State(state): State<Arc<AppState>>) -> Response {
    let snap = state.enter();
    let presets: Vec<_> = snap
        .registry
        .presets()
        .iter()
        .map(|p| json!({ "emotion": p.emotion.name(), "activations": activation_json(&p.activation) }))
        .collect();
    Json(json!({ "emotions": presets })).into_response()
}

async fn list_identities(State(state): State<Arc<AppState>>) -> Response {
    let snap = state.enter();
    let ids: Vec<_> = snap
        .identities
        .values()
        .map(|s| {
            json!({
                "id": s.bundle.identity_id,
                "vertex_count": s.bundle.vertex_count(),
                "split": s.split,
                "style_meta": s.bundle.style_meta,
                "predicted": s.predicted.get().is_some_and(Result::is_ok),
            })
        })
        .collect();
    let speech: Vec<_> = snap
        .speech
        .iter()
        .map(|(id, seq)| json!({ "id": id, "frames": seq.frame_count(), "frame_rate": seq.frame_rate }))
        .collect();
    Json(json!({
        "identities": ids,
        "speech": speech,
        "model_loaded": snap.models.is_some(),
    }))
    .into_response()
}

async fn template(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = state.enter();
    let s = served(&snap, &id)?;
    let t = &s.bundle.template;
    Ok(Json(json!({
        "identity_id": id,
        "vertex_count": t.vertex_count(),
        "vertices": t.positions(),
        "topology": t.topology(),
    }))
    .into_response())
}

async fn predict(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = state.enter();
    let s = served(&snap, &id)?;
    let (bases, cached) = predicted(&state, &snap, s)?;
    let aus: Vec<_> = bases
        .deltas()
        .iter()
        .map(|d| json!({ "id": d.au.to_string(), "rms": d.rms_magnitude() }))
        .collect();
    Ok(Json(json!({ "identity_id": id, "cached": cached, "aus": aus })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeRequest {
    pub identity_id: String,
    #[serde(default)]
    pub activations: BTreeMap<String, f32>,
    #[serde(default)]
    pub include_topology: bool,
    #[serde(default)]
    pub basis: BasisChoice,
}

#[derive(Serialize)]
struct ComposeResponse<'a> {
    identity_id: &'a str,
    vertex_count: usize,
    vertices: &'a [f32],
    #[serde(skip_serializing_if = "Option::is_none")]
    topology: Option<&'a [[u32; 3]]>,
}

async fn compose_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<ComposeRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let snap = state.enter();
    let s = served(&snap, &req.identity_id)?;
    let act = parse_activation(snap.registry, &req.activations)?;
    let bases = bases_for(&state, &snap, s, req.basis)?;
    let start = Instant::now();
    let mesh = compose(&s.bundle.template, &bases, &act)?;
    let micros = start.elapsed().as_micros();
    let body = ComposeResponse {
        identity_id: &req.identity_id,
        vertex_count: mesh.vertex_count(),
        vertices: mesh.positions(),
        topology: if req.include_topology { mesh.topology() } else { None },
    };
    let mut resp = Json(body).into_response();
    let h = resp.headers_mut();
    h.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    h.insert(TIMING_HEADER, HeaderValue::from(micros as u64));
    Ok(resp)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnimateRequest {
    pub identity_id: String,
    pub emotion: String,
    #[serde(default = "one")]
    pub intensity: f32,
    pub speech_offsets_id: String,
    #[serde(default)]
    pub basis: BasisChoice,
}

fn one() -> f32 {
    1.0
}

async fn animate_handler(
    State(state): State<Arc<AppState>>,
    body: Result<Json<AnimateRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body?;
    let snap = state.enter();
    let s = served(&snap, &req.identity_id)?;
    let speech = snap
        .speech
        .get(&req.speech_offsets_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown speech offsets `{}`", req.speech_offsets_id)))?;
    if !(0.0..=1.0).contains(&req.intensity) {
        return Err(ApiError::Invalid {
            message: "invalid intensity".into(),
            violations: vec![format!("intensity {} outside [0, 1]", req.intensity)],
        });
    }
    let emotion: Emotion = req.emotion.parse()?;
    let act = snap
        .registry
        .emotion_to_activation(emotion.name())?
        .scaled(req.intensity);
    let bases = bases_for(&state, &snap, s, req.basis)?;
    let frames = animate(&s.bundle.template, &bases, speech, &act)?;
    let handle = sha256_hex(
        format!(
            "{}\n{}\n{}\n{}\n{:?}",
            req.identity_id,
            emotion.name(),
            req.intensity,
            req.speech_offsets_id,
            req.basis
        )
        .as_bytes(),
    )[..16]
        .to_string();
    let frames: Vec<&[f32]> = frames.iter().map(|f| f.positions()).collect();
    Ok(Json(json!({
        "handle": handle,
        "identity_id": req.identity_id,
        "emotion": emotion.name(),
        "intensity": req.intensity,
        "speech_offsets_id": req.speech_offsets_id,
        "frame_rate": speech.frame_rate,
        "frame_count": frames.len(),
        "vertex_count": s.bundle.vertex_count(),
        "frames": frames,
    }))
    .into_response())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    let snap = state.enter();
    Json(json!({
        "status": "ok",
        "model_loaded": snap.models.is_some(),
        "identities": snap.identities.len(),
        "requests": state.requests(),
        "predictions": state.predictions(),
    }))
    .into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/aus", get(list_aus))
        .route("/api/emotions", get(list_emotions))
        .route("/api/identities", get(list_identities))
        .route("/api/identity/{id}/template", get(template))
        .route("/api/identity/{id}/predict", post(predict))
        .route("/api/compose", post(compose_handler))
        .route("/api/animate", post(animate_handler))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
