//! HTTP scenario service over an immutable snapshot loaded from a state directory.

use std::path::Path;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use cfsim_core::data::{load_sessions, Dataset, Format};
use cfsim_core::eval::MetricsRecord;
use cfsim_core::graph::{CausalGraph, Intervention};
use cfsim_core::model::{load_checkpoint, BehaviorModel};
use cfsim_core::scm::FittedScm;
use cfsim_core::simulate::{simulate_counterfactual, Components, SimulationOptions};
use cfsim_core::Error;
use serde::{Deserialize, Serialize};
use tower_http::cors::{Any, CorsLayer};

pub const GRAPH_FILE: &str = "graph.json";
pub const SCM_FIT_FILE: &str = "scm_fit.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const DATA_FILE: &str = "data.jsonl";

/// Upper bound on `num_trajectories` per request.
pub const MAX_TRAJECTORIES: usize = 100_000;

/// Everything a request reads; never mutated after startup.
#[derive(Debug)]
pub struct ServiceState {
    pub graph: CausalGraph,
    pub fitted: FittedScm,
    pub model: BehaviorModel,
    pub observed: Dataset,
    pub baseline: MetricsRecord,
}

impl ServiceState {
    pub fn new(
        graph: CausalGraph,
        fitted: FittedScm,
        model: BehaviorModel,
        observed: Dataset,
    ) -> cfsim_core::Result<Self> {
        let baseline = MetricsRecord::from_dataset(&observed);
        let state = ServiceState {
            graph,
            fitted,
            model,
            observed,
            baseline,
        };
        state.components().check()?;
        Ok(state)
    }

    /// Reads `graph.json`, `scm_fit.json`, `model.ckpt` and `data.jsonl` from `dir`.
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        use anyhow::Context;
        let read_json = |name: &str| -> anyhow::Result<serde_json::Value> {
            let p = dir.join(name);
            let text =
                std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        };
        let graph: CausalGraph = serde_json::from_value(read_json(GRAPH_FILE)?)?;
        let fitted: FittedScm = serde_json::from_value(read_json(SCM_FIT_FILE)?)?;
        let model = load_checkpoint(dir.join(MODEL_FILE))
            .with_context(|| format!("loading {MODEL_FILE}"))?;
        let observed = load_sessions(dir.join(DATA_FILE), Format::Jsonl)
            .with_context(|| format!("loading {DATA_FILE}"))?;
        Ok(ServiceState::new(graph, fitted, model, observed)?)
    }

    fn components(&self) -> Components<'_> {
        Components {
            graph: &self.graph,
            model: &self.model,
            fitted: &self.fitted,
            observed: &self.observed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub variable: String,
    pub level: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRequest {
    pub interventions: Vec<Assignment>,
    #[serde(default = "default_trajectories")]
    pub num_trajectories: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_trajectories() -> usize {
    SimulationOptions::default().n
}

fn default_horizon() -> usize {
    SimulationOptions::default().horizon
}

fn default_temperature() -> f64 {
    1.0
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::UnknownVariable(_) | Error::UnknownLevel { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::InvalidIntervention(_) | Error::InvalidConfig(_) | Error::InvalidQuery(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

impl ScenarioRequest {
    /// Checks the request against `state` and converts it to simulation inputs.
    pub fn validate(
        &self,
        state: &ServiceState,
    ) -> Result<(Intervention, SimulationOptions), ApiError> {
        if self.interventions.is_empty() {
            return Err(ApiError::bad_request("interventions must not be empty"));
        }
        if self.num_trajectories == 0 || self.num_trajectories > MAX_TRAJECTORIES {
            return Err(ApiError::bad_request(format!(
                "num_trajectories must lie in 1..={MAX_TRAJECTORIES}"
            )));
        }
        let max = state.model.config().max_seq_len;
        if self.horizon == 0 || self.horizon > max {
            return Err(ApiError::bad_request(format!(
                "horizon must lie in 1..={max}"
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ApiError::bad_request(
                "temperature must be a positive number",
            ));
        }
        let i = Intervention::new(
            &state.graph,
            self.interventions
                .iter()
                .map(|a| (a.variable.as_str(), a.level.as_str())),
        )?;
        Ok((
            i,
            SimulationOptions {
                n: self.num_trajectories,
                horizon: self.horizon,
                temperature: self.temperature,
                seed: self.seed,
            },
        ))
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn graph(State(s): State<Arc<ServiceState>>) -> Json<CausalGraph> {
    Json(s.graph.clone())
}

async fn baseline(State(s): State<Arc<ServiceState>>) -> Json<MetricsRecord> {
    Json(s.baseline.clone())
}

async fn scenario(State(s): State<Arc<ServiceState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: ScenarioRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    let (i, opts) = req.validate(&s)?;
    let result =
        tokio::task::spawn_blocking(move || simulate_counterfactual(&s.components(), &i, &opts))
            .await
            .map_err(|e| ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: format!("simulation task failed: {e}"),
            })??;
    let body = serde_json::to_vec(&result).map_err(|e| ApiError::from(Error::from(e)))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

pub fn router(state: Arc<ServiceState>) -> Router {
    let cors = CorsLayer::new()
        .allow_origin(Any)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/graph", get(graph))
        .route("/api/metrics/baseline", get(baseline))
        .route("/api/scenario", post(scenario))
        .layer(cors)
        .with_state(state)
}

pub async fn serve(state: ServiceState, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await?;
    Ok(())
}
