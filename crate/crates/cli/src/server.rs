//! HTTP inference over one frozen checkpoint and one dataset.
//!
//! `GET /scenes`, `GET /scene/{id}/render` (binary P6 pixmap), `POST /click`
//! with `{scene, x, y}` and `POST /box` with `{scene, cx, cy, w, h}`, all in
//! normalized coordinates. Every response carries `x-model-version`, the
//! SHA-256 of the checkpoint bytes.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use granu::checkpoint::Checkpoint;
use granu::dataset::Dataset;
use granu::mask::NormBox;
use granu::net::{Model, PredictionSet};
use granu::prompt::{click_to_anchor, PromptKind, DEFAULT_CLICK_EPS};
use granu::scene::{ConceptVocab, DataSample};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::cli::log_enabled;
use crate::error::CliResult;

pub const VERSION_HEADER: &str = "x-model-version";

pub struct AppState {
    model: Model,
    vocab: ConceptVocab,
    labeled: bool,
    samples: Vec<DataSample>,
    version: String,
}

impl AppState {
    pub fn new(checkpoint: &[u8], data: Dataset) -> CliResult<Self> {
        let ckpt = Checkpoint::from_bytes(checkpoint)?;
        if ckpt.vocab != data.vocab {
            return Err(granu::Error::Contract("checkpoint and dataset vocabularies differ".into()).into());
        }
        let version = Sha256::digest(checkpoint).iter().map(|b| format!("{b:02x}")).collect();
        Ok(Self {
            model: ckpt.model,
            vocab: ckpt.vocab,
            labeled: ckpt.labeled,
            samples: data.samples,
            version,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn scene_count(&self) -> usize {
        self.samples.len()
    }

    fn scene(&self, id: usize) -> Result<&DataSample, ApiError> {
        self.samples
            .get(id)
            .ok_or_else(|| ApiError::not_found(format!("no scene {id}")))
    }

    fn result(&self, p: &PredictionSet, i: usize) -> LevelResult {
        // concepts are reported only by models trained with labels, and only
        // when some concept beats "no object"
        let labeled = self.labeled && {
            let probs = p.object_probs(i);
            p.best_object(i).1 >= probs[probs.len() - 1]
        };
        let object = labeled.then(|| {
            let (id, score) = p.best_object(i);
            ConceptScore {
                id,
                name: self.vocab.object_name(id).to_string(),
                score,
            }
        });
        let part = (labeled && self.vocab.num_parts() > 0).then(|| {
            let (id, score) = p.best_part(i);
            ConceptScore {
                id,
                name: self.vocab.part_name(id).to_string(),
                score,
            }
        });
        LevelResult {
            level: i,
            rle: p.mask(i).to_rle().to_string(),
            confidence: p.confidence[i],
            object,
            part,
            bbox: p.boxes[i].to_array(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub id: usize,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: usize,
    /// `"W H r0 r1 ..."`, column-major runs starting with background.
    pub rle: String,
    pub confidence: f64,
    pub object: Option<ConceptScore>,
    pub part: Option<ConceptScore>,
    /// `[cx, cy, w, h]` normalized.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickResponse {
    pub scene: usize,
    pub x: f64,
    pub y: f64,
    pub results: Vec<LevelResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxResponse {
    pub scene: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub result: LevelResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: usize,
    pub data_type: String,
    pub width: usize,
    pub height: usize,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub field: Option<String>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn bad_field(field: &str, msg: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: msg.into(),
                field: Some(field.to_string()),
            },
        }
    }

    fn not_found(msg: String) -> Self {
        Self {
            status: StatusCode::NOT_FOUND,
            body: ErrorBody { error: msg, field: None },
        }
    }

    fn internal(msg: String) -> Self {
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody { error: msg, field: None },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

fn object_body(body: &[u8]) -> Result<Map<String, Value>, ApiError> {
    match serde_json::from_slice(body) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(ApiError::bad_field("body", "expected a JSON object")),
        Err(e) => Err(ApiError::bad_field("body", format!("invalid JSON: {e}"))),
    }
}

fn field_f64(m: &Map<String, Value>, name: &str) -> Result<f64, ApiError> {
    match m.get(name) {
        None => Err(ApiError::bad_field(name, format!("missing field {name}"))),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| ApiError::bad_field(name, format!("{name} must be a number"))),
    }
}

fn field_unit(m: &Map<String, Value>, name: &str) -> Result<f64, ApiError> {
    let v = field_f64(m, name)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(ApiError::bad_field(name, format!("{name} = {v} outside [0, 1]")));
    }
    Ok(v)
}

fn field_scene(m: &Map<String, Value>) -> Result<usize, ApiError> {
    match m.get("scene") {
        None => Err(ApiError::bad_field("scene", "missing field scene")),
        Some(v) => v
            .as_u64()
            .map(|id| id as usize)
            .ok_or_else(|| ApiError::bad_field("scene", "scene must be a nonnegative integer")),
    }
}

async fn scenes(State(st): State<Arc<AppState>>) -> Json<Vec<SceneInfo>> {
    Json(
        st.samples
            .iter()
            .enumerate()
            .map(|(id, s)| SceneInfo {
                id,
                data_type: format!("{:?}", s.data_type),
                width: s.grid.width(),
                height: s.grid.height(),
                instances: s.instances.len(),
            })
            .collect(),
    )
}

async fn render(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let id: usize = id
        .parse()
        .map_err(|_| ApiError::not_found(format!("no scene {id:?}")))?;
    let ppm = st.scene(id)?.image.to_ppm();
    Ok(([(header::CONTENT_TYPE, "image/x-portable-pixmap")], ppm).into_response())
}

async fn infer(
    st: Arc<AppState>,
    scene: usize,
    anchor: NormBox,
    kind: PromptKind,
) -> Result<PredictionSet, ApiError> {
    st.scene(scene)?;
    tokio::task::spawn_blocking(move || st.model.predict(&st.samples[scene].image, anchor, kind))
        .await
        .map_err(|e| ApiError::internal(format!("inference task failed: {e}")))?
        .map_err(|e| ApiError::internal(e.to_string()))
}

async fn click(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<ClickResponse>, ApiError> {
    let m = object_body(&body)?;
    let scene = field_scene(&m)?;
    let x = field_unit(&m, "x")?;
    let y = field_unit(&m, "y")?;
    let anchor = click_to_anchor(x, y, DEFAULT_CLICK_EPS).map_err(|e| ApiError::bad_field("x", e.to_string()))?;
    let preds = infer(st.clone(), scene, anchor, PromptKind::Click).await?;
    if log_enabled() {
        eprintln!("click scene {scene} at ({x:.4}, {y:.4})");
    }
    Ok(Json(ClickResponse {
        scene,
        x,
        y,
        results: (0..preds.len()).map(|i| st.result(&preds, i)).collect(),
    }))
}

async fn boxed(State(st): State<Arc<AppState>>, body: Bytes) -> Result<Json<BoxResponse>, ApiError> {
    let m = object_body(&body)?;
    let scene = field_scene(&m)?;
    let cx = field_unit(&m, "cx")?;
    let cy = field_unit(&m, "cy")?;
    let mut size = [0.0; 2];
    for (s, name) in size.iter_mut().zip(["w", "h"]) {
        *s = field_unit(&m, name)?;
        if *s == 0.0 {
            return Err(ApiError::bad_field(name, format!("{name} must be positive")));
        }
    }
    let anchor = NormBox::new(cx, cy, size[0], size[1]).map_err(|e| ApiError::bad_field("box", e.to_string()))?;
    let preds = infer(st.clone(), scene, anchor, PromptKind::Box).await?;
    if log_enabled() {
        eprintln!("box scene {scene} at {:?}", anchor.to_array());
    }
    Ok(Json(BoxResponse {
        scene,
        bbox: anchor.to_array(),
        result: st.result(&preds, 0),
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    let version = HeaderValue::from_str(state.version()).expect("hex digest is a valid header value");
    Router::new()
        .route("/scenes", get(scenes))
        .route("/scene/{id}/render", get(render))
        .route("/click", post(click))
        .route("/box", post(boxed))
        .with_state(state)
        .layer(axum::middleware::map_response(move |mut r: Response| {
            let version = version.clone();
            async move {
                r.headers_mut().insert(VERSION_HEADER, version);
                r
            }
        }))
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}
