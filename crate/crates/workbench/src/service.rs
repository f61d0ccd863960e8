// SPDX-License-Identifier: MIT OR Apache-2.0

//! Local HTTP API over a loaded model, checkpoint and dataset.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use csae_core::data::Dataset;
use csae_core::intervention::{intervene, validate_edits, CounterfactualResult, InterventionRequest};
use csae_core::model::TargetModel;
use csae_core::pipeline::SaeCheckpoint;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::sync::OnceCell;

use crate::dataset::MaskArray;
use crate::lock::is_locked;
use crate::reports::{entropy_report, eval_ids, js_report, locr_report, DEFAULT_EPSILON};

pub struct Workbench {
    pub model: TargetModel,
    pub ckpt: SaeCheckpoint,
    pub data: Dataset,
    /// Directory watched for the finetune lock.
    pub root: PathBuf,
    /// Cap on held-out images used by reports.
    pub report_limit: Option<usize>,
    entropy: OnceCell<Value>,
    js: OnceCell<Value>,
    locr: OnceCell<Value>,
}

impl Workbench {
    pub fn new(model: TargetModel, ckpt: SaeCheckpoint, data: Dataset, root: PathBuf) -> Self {
        Self {
            model,
            ckpt,
            data,
            root,
            report_limit: None,
            entropy: OnceCell::new(),
            js: OnceCell::new(),
            locr: OnceCell::new(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    status: u16,
    error: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            status: self.0.as_u16(),
            error: self.1,
        };
        (self.0, Json(body)).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Shared = Arc<Workbench>;

impl Workbench {
    fn check_lock(&self) -> Result<(), ApiError> {
        if is_locked(&self.root) {
            return Err(ApiError(StatusCode::CONFLICT, "model is locked for finetuning".into()));
        }
        Ok(())
    }

    fn check_image(&self, id: usize) -> Result<(), ApiError> {
        if id >= self.data.len() {
            return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown image id {id}")));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<(), ApiError> {
        if self.ckpt.layer(layer).is_err() {
            return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown layer {layer}")));
        }
        Ok(())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

#[derive(Debug, Serialize)]
struct LayerInfo {
    layer: usize,
    height: usize,
    width: usize,
    channels: usize,
    positions: usize,
    tokenizer: bool,
    aggregator: bool,
    free: bool,
}

#[derive(Debug, Serialize)]
struct LayersBody {
    layers: Vec<LayerInfo>,
    stages_done: [bool; 3],
}

async fn layers(State(s): State<Shared>) -> ApiResult<LayersBody> {
    Ok(Json(LayersBody {
        layers: s
            .ckpt
            .layers
            .iter()
            .map(|l| LayerInfo {
                layer: l.layer,
                height: l.height,
                width: l.width,
                channels: l.channels,
                positions: l.positions(),
                tokenizer: l.tokenizer.is_some(),
                aggregator: l.aggregator.is_some(),
                free: l.free.is_some(),
            })
            .collect(),
        stages_done: s.ckpt.stages_done,
    }))
}

#[derive(Debug, Serialize)]
struct ConceptsBody {
    vocabulary: Vec<String>,
}

async fn concepts(State(s): State<Shared>) -> ApiResult<ConceptsBody> {
    Ok(Json(ConceptsBody {
        vocabulary: s.data.vocabulary.clone(),
    }))
}

#[derive(Debug, Serialize)]
struct ImageBody {
    id: usize,
    sample_id: u32,
    label: usize,
    prediction: usize,
    shape: Vec<usize>,
    pixels: Vec<f32>,
}

async fn image(State(s): State<Shared>, Path(id): Path<usize>) -> ApiResult<ImageBody> {
    s.check_lock()?;
    s.check_image(id)?;
    blocking(move || {
        let sample = &s.data.samples[id];
        let prediction = s.model.predict(&s.data, &[id]).map_err(internal)?[0];
        Ok(Json(ImageBody {
            id,
            sample_id: sample.id,
            label: sample.label,
            prediction,
            shape: sample.image.shape().to_vec(),
            pixels: sample.image.data().to_vec(),
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct LayerQuery {
    layer: usize,
}

#[derive(Debug, Serialize)]
struct ScoresBody {
    id: usize,
    layer: usize,
    scores: Vec<f32>,
    masks: MaskArray,
}

async fn scores(State(s): State<Shared>, Path(id): Path<usize>, Query(q): Query<LayerQuery>) -> ApiResult<ScoresBody> {
    s.check_lock()?;
    s.check_image(id)?;
    s.check_layer(q.layer)?;
    blocking(move || {
        let sae = s.ckpt.layer(q.layer).map_err(internal)?;
        let h = sae.features(&s.model, &s.data.batch(&[id])).map_err(internal)?;
        let r = sae.readout(&h).map_err(internal)?.readout(0);
        Ok(Json(ScoresBody {
            id,
            layer: q.layer,
            scores: r.s,
            masks: MaskArray {
                dims: r.m.shape().to_vec(),
                values: r.m.into_data(),
            },
        }))
    })
    .await
}

async fn post_intervene(State(s): State<Shared>, Json(req): Json<InterventionRequest>) -> ApiResult<CounterfactualResult> {
    s.check_lock()?;
    s.check_image(req.image)?;
    s.check_layer(req.layer)?;
    validate_edits(&req.edits, s.ckpt.concepts).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    blocking(move || intervene(&req, &s.model, &s.ckpt, &s.data).map(Json).map_err(internal)).await
}

async fn report(State(s): State<Shared>, Path(kind): Path<String>) -> ApiResult<Value> {
    s.check_lock()?;
    let cell = match kind.as_str() {
        "entropy" => &s.entropy,
        "js" => &s.js,
        "locr" => &s.locr,
        _ => return Err(ApiError(StatusCode::NOT_FOUND, format!("unknown report `{kind}`"))),
    };
    let value = cell
        .get_or_try_init(|| {
            let s = s.clone();
            blocking(move || {
                let ids = eval_ids(&s.data, &s.ckpt, s.report_limit);
                let v = match kind.as_str() {
                    "entropy" => serde_json::to_value(entropy_report(&s.model, &s.ckpt, &s.data, &ids, Some(DEFAULT_EPSILON)).map_err(internal)?),
                    "js" => serde_json::to_value(js_report(&s.model, &s.ckpt, &s.data, &ids, DEFAULT_EPSILON).map_err(internal)?.0),
                    _ => serde_json::to_value(locr_report(&s.model, &s.ckpt, &s.data, &ids).map_err(internal)?),
                };
                v.map_err(internal)
            })
        })
        .await?;
    Ok(Json(value.clone()))
}

pub fn router(state: Arc<Workbench>) -> Router {
    Router::new()
        .route("/layers", get(layers))
        .route("/concepts", get(concepts))
        .route("/images/{id}", get(image))
        .route("/images/{id}/scores", get(scores))
        .route("/intervene", post(post_intervene))
        .route("/reports/{kind}", get(report))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<Workbench>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
