//! `POST /analyze` and `GET /health`.
//!
//! The analysis endpoint accepts a WAV file as the raw request body or as
//! the multipart field `audio`. Nothing is written to disk unless the
//! service has a store directory and the request asks for it with
//! `?store=true`.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use coughdetect_core::model::ModelWeights;
use coughdetect_core::pipeline::featurize_wav;
use coughdetect_core::{Error, PipelineConfig};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

pub const POSITIVE_MESSAGE: &str = "Your cough sound shares similarities to those of Covid-19 patients, if you are a high-risk individual, please contact health services immediately, otherwise quarantine yourself.";
pub const NEGATIVE_MESSAGE: &str = "Our system does not recognise your pattern as similar to those with Covid-19 in our database, still if you feel the most likely symptoms, please contact health services.";
pub const RETRY_MESSAGE: &str = "Cough not detected, please try again.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    PositiveLikely,
    NegativeLikely,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub cough_detected: bool,
    pub verdict: Option<Verdict>,
    pub positive_probability: Option<f64>,
    pub message: String,
    /// Pipeline compute time, excluding upload and queueing.
    pub processing_ms: f64,
}

/// Run the full pipeline on WAV bytes.
pub fn analyze_bytes(bytes: &[u8], cfg: &PipelineConfig, model: &ModelWeights) -> coughdetect_core::Result<AnalysisResult> {
    let start = Instant::now();
    let f = featurize_wav(bytes, cfg)?;
    let mut result = match f.tensor {
        None => AnalysisResult {
            cough_detected: false,
            verdict: None,
            positive_probability: None,
            message: RETRY_MESSAGE.into(),
            processing_ms: 0.0,
        },
        Some(t) => {
            let p = model.predict(&t)?[1];
            let positive = p >= 0.5;
            AnalysisResult {
                cough_detected: true,
                verdict: Some(if positive { Verdict::PositiveLikely } else { Verdict::NegativeLikely }),
                positive_probability: Some(p),
                message: if positive { POSITIVE_MESSAGE } else { NEGATIVE_MESSAGE }.into(),
                processing_ms: 0.0,
            }
        }
    };
    result.processing_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(result)
}

#[derive(Clone)]
pub struct AppState {
    pub model: Arc<ModelWeights>,
    pub model_version: String,
    pub pipeline: Arc<PipelineConfig>,
    pub workers: Arc<Semaphore>,
    pub store_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(model: ModelWeights, model_version: String, pipeline: PipelineConfig, workers: usize) -> anyhow::Result<Self> {
        if model.config.n_classes != 2 {
            anyhow::bail!("the service needs a two-class model, got {} classes", model.config.n_classes);
        }
        let channels = pipeline.tensor_mode.channels();
        if model.config.input_shape.2 != channels {
            anyhow::bail!(
                "model expects {} channels but the pipeline produces {channels}",
                model.config.input_shape.2
            );
        }
        Ok(Self {
            model: Arc::new(model),
            model_version,
            pipeline: Arc::new(pipeline),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            store_dir: None,
        })
    }
}

pub fn router(state: AppState, max_body_bytes: usize) -> Router {
    Router::new()
        .route("/analyze", post(analyze))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(max_body_bytes))
        .with_state(state)
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into() }))).into_response()
}

async fn health(State(state): State<AppState>) -> Response {
    Json(json!({ "status": "ok", "model_version": state.model_version })).into_response()
}

#[derive(Debug, Default, Deserialize)]
struct AnalyzeQuery {
    #[serde(default)]
    store: bool,
}

async fn read_audio(state: &AppState, req: Request) -> Result<Bytes, Response> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    if !multipart {
        return Bytes::from_request(req, state)
            .await
            .map_err(|r| error(r.status(), r.body_text()));
    }
    let mut form = Multipart::from_request(req, state)
        .await
        .map_err(|r| error(r.status(), r.body_text()))?;
    while let Some(field) = form.next_field().await.map_err(|e| error(e.status(), e.body_text()))? {
        if field.name() == Some("audio") {
            return field.bytes().await.map_err(|e| error(e.status(), e.body_text()));
        }
    }
    Err(error(StatusCode::BAD_REQUEST, "multipart body has no `audio` field"))
}

async fn analyze(State(state): State<AppState>, Query(query): Query<AnalyzeQuery>, req: Request) -> Response {
    let body = match read_audio(&state, req).await {
        Ok(b) => b,
        Err(r) => return r,
    };
    if body.is_empty() {
        return error(StatusCode::BAD_REQUEST, "empty request body");
    }
    let Ok(permit) = state.workers.clone().acquire_owned().await else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "service shutting down");
    };
    let model = state.model.clone();
    let cfg = state.pipeline.clone();
    let audio = body.clone();
    let outcome = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        analyze_bytes(&audio, &cfg, &model)
    })
    .await;
    let result = match outcome {
        Ok(Ok(r)) => r,
        Ok(Err(e @ (Error::Decode(_) | Error::UnsupportedFormat(_) | Error::EmptyInput(_)))) => {
            return error(StatusCode::BAD_REQUEST, e.to_string())
        }
        Ok(Err(e)) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, format!("analysis task failed: {e}")),
    };
    if query.store {
        if let Some(dir) = &state.store_dir {
            if let Err(e) = store(dir, &body, &result) {
                return error(StatusCode::INTERNAL_SERVER_ERROR, format!("storing upload: {e:#}"));
            }
        }
    }
    Json(result).into_response()
}

fn store(dir: &std::path::Path, audio: &[u8], result: &AnalysisResult) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_nanos();
    let id = format!("{stamp}-{}", &crate::commands::model_version(audio)[7..]);
    crate::commands::write_atomic(&dir.join(format!("{id}.wav")), audio)?;
    crate::commands::write_atomic(&dir.join(format!("{id}.json")), &serde_json::to_vec_pretty(result)?)?;
    Ok(())
}

/// Bind and serve until Ctrl-C.
pub async fn serve(state: AppState, host: &str, port: u16, max_body_bytes: usize) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind((host, port)).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state, max_body_bytes))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
