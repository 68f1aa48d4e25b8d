//! JSON HTTP interface over a trained model and its test windows.
//!
//! `GET /health`, `GET /subjects`, `GET /importance` and `POST /forecast`.
//! Client errors answer 400 (malformed body or schedule), 404 (unknown
//! subject) or 409 (scenario requested from a model without the treatment
//! channel), always with a `{"error": ...}` body.

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::importance::{model_importance, ImportanceTable, LagProfile};
use crate::scenarios::{forecast_scenarios, ScenarioError, ScenarioKind, ScenarioSpec};
use crate::tft::{ForecastSet, ModelError};
use crate::timegrid::{MaskedSeries, WindowSample};
use crate::trainer::TrainedModel;

#[derive(Debug, Clone, Serialize)]
pub struct ImportanceReport {
    #[serde(rename = "static")]
    pub static_: ImportanceTable,
    pub temporal: ImportanceTable,
    pub attention_lags: LagProfile,
}

pub struct AppState {
    pub model: TrainedModel,
    pub windows: Vec<WindowSample>,
    /// Treatment channel; `None` when the model has no such known-future
    /// input.
    pub channel: Option<String>,
    pub bin_minutes: u32,
    pub importance: Option<ImportanceReport>,
}

impl AppState {
    /// Precomputes importance over `windows`. `channel` is kept only if the
    /// model takes it as a known-future input.
    pub fn new(model: TrainedModel, windows: Vec<WindowSample>, channel: &str, bin_minutes: u32) -> Result<Self, ModelError> {
        let importance = if windows.is_empty() {
            None
        } else {
            let (static_, temporal, attention_lags) = model_importance(&model, &windows)?;
            Some(ImportanceReport {
                static_,
                temporal,
                attention_lags,
            })
        };
        let channel = model
            .config
            .known_future
            .iter()
            .any(|c| c == channel)
            .then(|| channel.to_string());
        Ok(Self {
            model,
            windows,
            channel,
            bin_minutes,
            importance,
        })
    }

    fn window(&self, id: &str) -> Option<&WindowSample> {
        self.windows.iter().find(|w| w.encounter_id == id)
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<ScenarioError> for ApiError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::MissingChannel(_) => Self::new(StatusCode::CONFLICT, e.to_string()),
            ScenarioError::Schedule(_) | ScenarioError::Model(ModelError::Input(_)) => Self::bad_request(e.to_string()),
            ScenarioError::Model(_) => Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        ScenarioError::Model(e).into()
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ForecastRequest {
    subject: Option<String>,
    window: Option<WindowSample>,
    scenarios: Option<Vec<ScenarioRequest>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioRequest {
    name: ScenarioKind,
    schedule: Option<Vec<f64>>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/subjects", get(subjects))
        .route("/importance", get(importance))
        .route("/forecast", post(forecast))
        .with_state(state)
}

pub async fn serve(state: Arc<AppState>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state)).await
}

async fn health(State(s): State<Arc<AppState>>) -> Json<Value> {
    let c = &s.model.config;
    Json(json!({
        "status": "ok",
        "fingerprint": s.model.fingerprint,
        "targets": c.targets,
        "quantiles": c.quantiles,
        "past_len": c.past_len,
        "horizon": c.horizon,
        "bin_minutes": s.bin_minutes,
        "channel": s.channel,
        "subjects": s.windows.len(),
    }))
}

async fn subjects(State(s): State<Arc<AppState>>) -> Json<Value> {
    let list: Vec<Value> = s
        .windows
        .iter()
        .map(|w| {
            let schedule = s.channel.as_ref().and_then(|c| w.future_known.get(c));
            json!({
                "id": w.encounter_id,
                "treated": schedule.is_some_and(|v| v.iter().any(|&x| x == 1.0)),
            })
        })
        .collect();
    Json(json!({ "subjects": list }))
}

async fn importance(State(s): State<Arc<AppState>>) -> Result<Json<ImportanceReport>, ApiError> {
    s.importance
        .clone()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "no windows to aggregate importance over"))
}

async fn forecast(State(s): State<Arc<AppState>>, body: Bytes) -> Result<Json<Value>, ApiError> {
    let req: ForecastRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))?;
    tokio::task::spawn_blocking(move || run_forecast(&s, req))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map(Json)
}

fn run_forecast(s: &AppState, req: ForecastRequest) -> Result<Value, ApiError> {
    let h = s.model.config.horizon;
    let window = match (req.subject, req.window) {
        (Some(id), None) => s
            .window(&id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown subject `{id}`")))?,
        (None, Some(mut w)) => {
            for t in &s.model.config.targets {
                w.targets_future.entry(t.clone()).or_insert_with(|| MaskedSeries::missing(h));
            }
            w
        }
        _ => return Err(ApiError::bad_request("give exactly one of `subject` and `window`")),
    };

    let (observed, scenarios) = match (&s.channel, req.scenarios) {
        (None, Some(_)) => {
            return Err(ApiError::new(StatusCode::CONFLICT, "model has no treatment channel"));
        }
        (None, None) => {
            let f = s.model.forecast(std::slice::from_ref(&window))?.remove(0);
            (None, vec![scenario_json("truth", None, &f, &BTreeMap::new())])
        }
        (Some(channel), requested) => {
            let specs = match requested {
                None => ScenarioSpec::standard(&window, channel)?,
                Some(list) => list
                    .into_iter()
                    .map(|r| match (r.name, r.schedule) {
                        (ScenarioKind::Truth, None) => ScenarioSpec::truth(&window, channel),
                        (ScenarioKind::AllOnes, None) => Ok(ScenarioSpec::all_ones(h)),
                        (ScenarioKind::AllZeros, None) => Ok(ScenarioSpec::all_zeros(h)),
                        (ScenarioKind::Custom, Some(v)) => Ok(ScenarioSpec::custom(v)),
                        (ScenarioKind::Custom, None) => Err(ScenarioError::Schedule("custom needs a schedule".into())),
                        (k, Some(_)) => Err(ScenarioError::Schedule(format!("`{}` takes no schedule", k.as_str()))),
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            };
            if specs.is_empty() {
                return Err(ApiError::bad_request("empty scenario list"));
            }
            let result = forecast_scenarios(&s.model, &window, channel, &specs)?;
            let list = result
                .scenarios
                .iter()
                .map(|sc| scenario_json(sc.spec.name.as_str(), Some(&sc.spec.schedule), &sc.forecast, &sc.mae))
                .collect();
            (Some(result.observed_schedule), list)
        }
    };

    let series = |m: &BTreeMap<String, MaskedSeries>| -> BTreeMap<String, Value> {
        m.iter()
            .map(|(k, v)| (k.clone(), json!({ "values": v.values, "mask": v.is_real })))
            .collect()
    };
    Ok(json!({
        "subject": window.encounter_id,
        "fingerprint": s.model.fingerprint,
        "past_len": s.model.config.past_len,
        "horizon": h,
        "bin_minutes": s.bin_minutes,
        "quantiles": s.model.config.quantiles,
        "channel": s.channel,
        "observed_schedule": observed,
        "past": series(&window.past),
        "truth": series(&window.targets_future),
        "scenarios": scenarios,
    }))
}

/// Quantile column name: 0.1 becomes `q10`.
pub fn quantile_key(q: f64) -> String {
    format!("q{}", (q * 100.0).round() as u32)
}

fn scenario_json(name: &str, schedule: Option<&Vec<f64>>, f: &ForecastSet, mae: &BTreeMap<String, Option<f64>>) -> Value {
    let forecast: BTreeMap<&str, BTreeMap<String, &Vec<f64>>> = f
        .targets
        .iter()
        .enumerate()
        .map(|(v, name)| {
            let qs = f
                .quantiles
                .iter()
                .enumerate()
                .map(|(qi, &q)| (quantile_key(q), &f.values[v][qi]))
                .collect();
            (name.as_str(), qs)
        })
        .collect();
    json!({ "name": name, "schedule": schedule, "forecast": forecast, "mae": mae })
}
