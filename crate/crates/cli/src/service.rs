//! HTTP front end over loaded predictors.
//!
//! `POST /v1/predict` runs a standard model on observed pasts of every
//! agent. `POST /v1/predict_conditioned` runs a conditioned model on full
//! ball and attacker trajectories plus defender pasts. `GET /v1/models`
//! lists what is loaded.

use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sparsetraj::dataio::Point;
use sparsetraj::models::{AgentSlot, ModelSpec, ModelState, SceneInput, ScenePrediction};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const BIND_ENV: &str = "SPARSETRAJ_BIND";

/// Pitch half-extents plus slack, in metres.
pub const PITCH_HALF_LENGTH_M: f64 = 52.5;
pub const PITCH_HALF_WIDTH_M: f64 = 34.0;
pub const PITCH_SLACK_M: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    pub model: String,
    /// Only "m" is accepted.
    #[serde(default)]
    pub units: Option<String>,
    pub frame_rate_hz: f64,
    /// Steps to return; at most the trained horizon. Defaults to it.
    #[serde(default)]
    pub horizon: Option<usize>,
    pub ball: Vec<Point>,
    pub attackers: Vec<Vec<Point>>,
    pub defenders: Vec<Vec<Point>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    /// Steps after the last observed frame, from 1.
    pub step: usize,
    pub position: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    /// "ball", "attacker" or "defender".
    pub group: String,
    pub index: usize,
    pub dense: Vec<Point>,
    pub controls: Option<Vec<ControlPoint>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionResponse {
    pub model: String,
    pub units: String,
    pub frame_rate_hz: f64,
    pub horizon: usize,
    pub conditioned: bool,
    pub agents: Vec<AgentTrack>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub spec: ModelSpec,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }

    fn field(status: StatusCode, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: Some(field.into()) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = serde_json::json!({
            "error": { "status": self.status.as_u16(), "message": self.message, "field": self.field }
        });
        (self.status, Json(body)).into_response()
    }
}

/// Immutable set of models. Requests hold an `Arc` to one snapshot, so a
/// reload never changes a request in flight.
#[derive(Debug, Default)]
pub struct Registry {
    models: BTreeMap<String, Arc<ModelState>>,
}

impl Registry {
    pub fn new(models: impl IntoIterator<Item = (String, ModelState)>) -> Self {
        Self { models: models.into_iter().map(|(id, m)| (id, Arc::new(m))).collect() }
    }

    pub fn get(&self, id: &str) -> Option<&Arc<ModelState>> {
        self.models.get(id)
    }

    pub fn list(&self) -> Vec<ModelInfo> {
        self.models.iter().map(|(id, m)| ModelInfo { id: id.clone(), spec: m.spec().clone() }).collect()
    }
}

#[derive(Clone, Default)]
pub struct AppState {
    current: Arc<RwLock<Arc<Registry>>>,
}

impl AppState {
    pub fn new(registry: Registry) -> Self {
        Self { current: Arc::new(RwLock::new(Arc::new(registry))) }
    }

    pub fn snapshot(&self) -> Arc<Registry> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Atomically replaces the loaded models.
    pub fn swap(&self, registry: Registry) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(registry);
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/models", get(list_models))
        .route("/v1/predict", post(predict))
        .route("/v1/predict_conditioned", post(predict_conditioned))
        .with_state(state)
}

async fn list_models(State(state): State<AppState>) -> Json<Vec<ModelInfo>> {
    Json(state.snapshot().list())
}

async fn predict(State(state): State<AppState>, body: Bytes) -> Result<Json<PredictionResponse>, ApiError> {
    handle(state, body, false).await
}

async fn predict_conditioned(State(state): State<AppState>, body: Bytes) -> Result<Json<PredictionResponse>, ApiError> {
    handle(state, body, true).await
}

async fn handle(state: AppState, body: Bytes, conditioned: bool) -> Result<Json<PredictionResponse>, ApiError> {
    let req: ScenarioRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed request body: {e}")))?;
    let registry = state.snapshot();
    let model = registry
        .get(&req.model)
        .cloned()
        .ok_or_else(|| ApiError::field(StatusCode::NOT_FOUND, "model", format!("unknown model `{}`", req.model)))?;
    let (scene, horizon) = check_request(&req, model.spec(), conditioned)?;
    let pred = tokio::task::spawn_blocking(move || model.predict(&scene))
        .await
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error"))?
        .map_err(|e| {
            eprintln!("predict failed: {e}");
            ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
        })?;
    Ok(Json(respond(&req, &pred, horizon, conditioned)))
}

/// Shape checks give 400, disagreements with the model's spec give 422.
pub fn check_request(
    req: &ScenarioRequest,
    spec: &ModelSpec,
    conditioned: bool,
) -> Result<(SceneInput, usize), ApiError> {
    let bad = |field: &str, msg: String| ApiError::field(StatusCode::BAD_REQUEST, field, msg);
    let incompatible = |field: &str, msg: String| ApiError::field(StatusCode::UNPROCESSABLE_ENTITY, field, msg);

    if let Some(u) = req.units.as_deref().filter(|u| *u != "m") {
        return Err(bad("units", format!("units must be \"m\", got \"{u}\"")));
    }
    for (field, group) in [("attackers", &req.attackers), ("defenders", &req.defenders)] {
        if group.len() != 11 {
            return Err(bad(field, format!("expected 11 agents, got {}", group.len())));
        }
    }
    if !(req.frame_rate_hz.is_finite() && req.frame_rate_hz > 0.0) {
        return Err(bad("frame_rate_hz", "must be positive".into()));
    }
    if req.horizon == Some(0) {
        return Err(bad("horizon", "must be at least 1".into()));
    }

    if spec.conditioned != conditioned {
        let want = if spec.conditioned { "/v1/predict_conditioned" } else { "/v1/predict" };
        return Err(incompatible("model", format!("model `{}` is served by {want}", req.model)));
    }
    if (req.frame_rate_hz - spec.frame_rate_hz).abs() > 1e-9 {
        return Err(incompatible(
            "frame_rate_hz",
            format!("model runs at {} Hz, request is at {} Hz", spec.frame_rate_hz, req.frame_rate_hz),
        ));
    }
    let horizon = req.horizon.unwrap_or(spec.horizon);
    if horizon > spec.horizon {
        return Err(incompatible("horizon", format!("{horizon} steps requested, model predicts {}", spec.horizon)));
    }
    let off = spec.offense_len();
    let mut tracks = vec![("ball".to_string(), &req.ball, off)];
    tracks.extend(req.attackers.iter().enumerate().map(|(i, t)| (format!("attackers[{i}]"), t, off)));
    tracks.extend(req.defenders.iter().enumerate().map(|(i, t)| (format!("defenders[{i}]"), t, spec.input_len)));
    for (field, track, want) in tracks {
        if track.len() != want {
            return Err(incompatible(&field, format!("{} steps, model expects {want}", track.len())));
        }
        let (lx, ly) = (PITCH_HALF_LENGTH_M + PITCH_SLACK_M, PITCH_HALF_WIDTH_M + PITCH_SLACK_M);
        if let Some(p) = track.iter().find(|p| !(p[0].abs() <= lx && p[1].abs() <= ly)) {
            return Err(incompatible(&field, format!("position ({}, {}) is off the pitch", p[0], p[1])));
        }
    }
    let scene =
        SceneInput { ball: req.ball.clone(), attackers: req.attackers.clone(), defenders: req.defenders.clone() };
    Ok((scene, horizon))
}

fn respond(req: &ScenarioRequest, pred: &ScenePrediction, horizon: usize, conditioned: bool) -> PredictionResponse {
    let agents = pred
        .agents
        .iter()
        .map(|a| {
            let (group, index) = match a.slot {
                AgentSlot::Ball => ("ball", 0),
                AgentSlot::Attacker(i) => ("attacker", i),
                AgentSlot::Defender(i) => ("defender", i),
            };
            AgentTrack {
                group: group.into(),
                index,
                dense: a.dense[..horizon].to_vec(),
                controls: a.controls.as_ref().map(|c| {
                    c.iter()
                        .filter(|(step, _)| *step <= horizon)
                        .map(|(step, position)| ControlPoint { step: *step, position: *position })
                        .collect()
                }),
            }
        })
        .collect();
    PredictionResponse {
        model: req.model.clone(),
        units: "m".into(),
        frame_rate_hz: req.frame_rate_hz,
        horizon,
        conditioned,
        agents,
    }
}

/// Flag, then environment, then the default.
pub fn bind_address(flag: Option<String>) -> String {
    flag.or_else(|| std::env::var(BIND_ENV).ok().filter(|s| !s.is_empty())).unwrap_or_else(|| DEFAULT_BIND.into())
}

pub async fn serve(state: AppState, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
