//! JSON-over-HTTP service. Models are loaded once at startup and shared
//! read-only between requests.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Query, State};
use axum::http::Uri;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use layoutgen::dataset::LengthPrior;
use layoutgen::metrics::{evaluate, FidExtractor, MetricKind, MetricReport};
use layoutgen::layout::{Layout, LayoutJson, LayoutSchema};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::engine::{generate, GenerateRequest, ModelInfo, ServedModel};
use crate::error::{AppError, AppResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().into(),
            message: self.public_message(),
            field: self.field().map(String::from),
        };
        (self.status(), Json(body)).into_response()
    }
}

/// Loaded models keyed by id; the first one serves requests that name none.
pub struct AppState {
    models: BTreeMap<String, Arc<ServedModel>>,
    default_model: String,
    extractor: Option<Arc<FidExtractor>>,
}

impl AppState {
    pub fn new(models: Vec<ServedModel>, extractor: Option<FidExtractor>) -> AppResult<Self> {
        let default_model = models
            .first()
            .map(|m| m.id.clone())
            .ok_or_else(|| AppError::Usage("at least one model must be loaded".into()))?;
        let mut map = BTreeMap::new();
        for m in models {
            let id = m.id.clone();
            if map.insert(id.clone(), Arc::new(m)).is_some() {
                return Err(AppError::Usage(format!("model id {id:?} is loaded twice")));
            }
        }
        Ok(AppState {
            models: map,
            default_model,
            extractor: extractor.map(Arc::new),
        })
    }

    pub fn model(&self, id: Option<&str>) -> AppResult<Arc<ServedModel>> {
        let id = id.unwrap_or(&self.default_model);
        self.models
            .get(id)
            .cloned()
            .ok_or_else(|| AppError::UnknownModel(id.to_string()))
    }
}

type Shared = State<Arc<AppState>>;

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> AppResult<T> {
    serde_json::from_slice(body).map_err(|e| AppError::Malformed(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> AppResult<T> + Send + 'static) -> AppResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::Internal(e.to_string()))?
}

async fn generate_handler(State(state): Shared, body: Bytes) -> AppResult<Response> {
    let request: GenerateRequest = parse_body(&body)?;
    let model = state.model(request.model.as_deref())?;
    let response = blocking(move || generate(&model, &request)).await?;
    Ok(Json(response).into_response())
}

async fn models_handler(State(state): Shared) -> Json<Vec<ModelInfo>> {
    Json(state.models.values().map(|m| m.info()).collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateRequest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub layouts: Vec<LayoutJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub references: Option<Vec<LayoutJson>>,
    /// Defaults to the reference-free metrics, plus DocSim when references
    /// are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Vec<MetricKind>>,
}

fn to_layouts(items: &[LayoutJson], schema: &LayoutSchema, field: &str) -> AppResult<Vec<Layout>> {
    items
        .iter()
        .enumerate()
        .map(|(i, l)| {
            l.to_layout(schema).map_err(|e| {
                AppError::Core(layoutgen::Error::Validation {
                    field: Some(format!("{field}[{i}]")),
                    message: e.to_string(),
                })
            })
        })
        .collect()
}

/// Scores the request layouts with `schema`'s category names.
pub fn evaluate_request(
    request: &EvaluateRequest,
    schema: &LayoutSchema,
    extractor: Option<&FidExtractor>,
) -> AppResult<MetricReport> {
    let layouts = to_layouts(&request.layouts, schema, "layouts")?;
    let references = request
        .references
        .as_deref()
        .map(|r| to_layouts(r, schema, "references"))
        .transpose()?;
    let metrics = request.metrics.clone().unwrap_or_else(|| {
        let mut m = vec![MetricKind::Iou, MetricKind::Overlap, MetricKind::Alignment];
        if references.is_some() {
            m.push(MetricKind::Docsim);
        }
        m
    });
    Ok(evaluate(&layouts, references.as_deref(), &metrics, extractor)?)
}

async fn evaluate_handler(State(state): Shared, body: Bytes) -> AppResult<Response> {
    let request: EvaluateRequest = parse_body(&body)?;
    let model = state.model(request.model.as_deref())?;
    let extractor = state.extractor.clone();
    let report = blocking(move || evaluate_request(&request, model.schema(), extractor.as_deref())).await?;
    Ok(Json(report).into_response())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorResponse {
    pub model: String,
    #[serde(flatten)]
    pub prior: LengthPrior,
    pub probabilities: BTreeMap<usize, f64>,
}

async fn prior_handler(State(state): Shared, Query(q): Query<HashMap<String, String>>) -> AppResult<Json<PriorResponse>> {
    let model = state.model(q.get("model").map(String::as_str))?;
    let prior = model.meta.length_prior.clone();
    let probabilities = prior.support().map(|k| (k, prior.probability(k))).collect();
    Ok(Json(PriorResponse {
        model: model.id.clone(),
        prior,
        probabilities,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub model: String,
    pub layers: usize,
    pub heads: usize,
    pub len: usize,
    /// `weights[layer][head][query][key]`.
    pub weights: Vec<Vec<Vec<Vec<f64>>>>,
}

/// Parses a comma-separated token id list and dumps the attention maps.
pub fn attention_dump(model: &ServedModel, seq: &str) -> AppResult<AttentionDump> {
    let bad = |m: String| {
        AppError::Core(layoutgen::Error::Validation {
            field: Some("seq".into()),
            message: m,
        })
    };
    let ids = seq
        .split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|_| bad(format!("{t:?} is not a token id"))))
        .collect::<AppResult<Vec<u32>>>()?;
    let vocab = model.schema().vocab().size();
    if let Some(id) = ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(bad(format!("token id {id} is outside the vocabulary of {vocab}")));
    }
    let max = model.params.config().max_seq_len;
    if ids.len() > max {
        return Err(bad(format!("{} tokens exceed the maximum length {max}", ids.len())));
    }
    let t = model.params.export_attention(&ids)?;
    let cfg = model.params.config();
    let (layers, heads, len) = (cfg.num_layers, cfg.num_heads, ids.len());
    let rows: Vec<Vec<f64>> = t.data().chunks(len).map(<[f64]>::to_vec).collect();
    let weights = rows
        .chunks(len)
        .map(<[Vec<f64>]>::to_vec)
        .collect::<Vec<_>>()
        .chunks(heads)
        .map(<[Vec<Vec<f64>>]>::to_vec)
        .collect();
    Ok(AttentionDump {
        model: model.id.clone(),
        layers,
        heads,
        len,
        weights,
    })
}

async fn attention_handler(State(state): Shared, Query(q): Query<HashMap<String, String>>) -> AppResult<Response> {
    let model = state.model(q.get("model").map(String::as_str))?;
    let seq = q.get("seq").cloned().ok_or_else(|| {
        AppError::Core(layoutgen::Error::Validation {
            field: Some("seq".into()),
            message: "query parameter seq is required".into(),
        })
    })?;
    let dump = blocking(move || attention_dump(&model, &seq)).await?;
    Ok(Json(dump).into_response())
}

async fn healthz() -> &'static str {
    "ok"
}

async fn fallback(uri: Uri) -> AppError {
    AppError::NotFound(uri.path().to_string())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/generate", post(generate_handler))
        .route("/v1/models", get(models_handler))
        .route("/v1/metrics/evaluate", post(evaluate_handler))
        .route("/v1/prior", get(prior_handler))
        .route("/v1/attention", get(attention_handler))
        .route("/healthz", get(healthz))
        .fallback(fallback)
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: TcpListener, state: Arc<AppState>) -> AppResult<()> {
    axum::serve(listener, router(state))
        .await
        .map_err(|e| AppError::Internal(e.to_string()))
}

