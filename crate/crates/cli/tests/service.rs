use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use coughdetect::service::{router, AnalysisResult, AppState, RETRY_MESSAGE};
use coughdetect_core::audio_io::{write_wav, WavEncoding};
use coughdetect_core::model::{ModelConfig, ModelWeights};
use coughdetect_core::synth::{family_recording, CoughFamily};
use coughdetect_core::{AudioSignal, PipelineConfig};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

const LIMIT: usize = 1 << 20;

fn state() -> AppState {
    let model = ModelWeights::init(ModelConfig::default(), 3).unwrap();
    AppState::new(model, "sha256:test".into(), PipelineConfig::default(), 4).unwrap()
}

fn wav(sig: &AudioSignal) -> Vec<u8> {
    write_wav(sig, WavEncoding::Pcm16).unwrap()
}

fn cough() -> Vec<u8> {
    wav(&family_recording(CoughFamily::Voiced, 21))
}

async fn send(app: &Router, uri: &str, body: Vec<u8>, content_type: &str) -> (StatusCode, Value) {
    let req = Request::post(uri).header("content-type", content_type).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn analyze(app: &Router, body: Vec<u8>) -> (StatusCode, Value) {
    send(app, "/analyze", body, "audio/wav").await
}

fn without_timing(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("processing_ms");
    v
}

#[tokio::test]
async fn silence_asks_to_retry() {
    let app = router(state(), LIMIT);
    let (status, v) = analyze(&app, wav(&AudioSignal::new(vec![0.0; 44100], 44100))).await;
    assert_eq!(status, StatusCode::OK);
    let r: AnalysisResult = serde_json::from_value(v).unwrap();
    assert!(!r.cough_detected);
    assert_eq!(r.message, RETRY_MESSAGE);
    assert_eq!(r.verdict, None);
}

#[tokio::test]
async fn cough_gets_a_verdict() {
    let app = router(state(), LIMIT);
    let (status, v) = analyze(&app, cough()).await;
    assert_eq!(status, StatusCode::OK);
    let r: AnalysisResult = serde_json::from_value(v).unwrap();
    assert!(r.cough_detected);
    assert!(r.verdict.is_some());
    let p = r.positive_probability.unwrap();
    assert!((0.0..=1.0).contains(&p));
    assert!(r.processing_ms >= 0.0);
}

#[tokio::test]
async fn multipart_upload_matches_raw_upload() {
    let app = router(state(), LIMIT);
    let audio = cough();
    let mut body = b"--XyZ\r\nContent-Disposition: form-data; name=\"audio\"; filename=\"c.wav\"\r\nContent-Type: audio/wav\r\n\r\n".to_vec();
    body.extend_from_slice(&audio);
    body.extend_from_slice(b"\r\n--XyZ--\r\n");
    let (s1, v1) = send(&app, "/analyze", body, "multipart/form-data; boundary=XyZ").await;
    let (s2, v2) = analyze(&app, audio).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(without_timing(v1), without_timing(v2));
}

#[tokio::test]
async fn bad_bodies_are_rejected() {
    let app = router(state(), 4096);
    let (status, v) = analyze(&app, b"RIFF\0\0\0\0garbage".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].is_string());
    let (status, _) = analyze(&app, Vec::new()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = analyze(&app, vec![0u8; 10_000]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn concurrent_requests_agree() {
    let app = router(state(), LIMIT);
    let audio = cough();
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (app, audio) = (app.clone(), audio.clone());
            tokio::spawn(async move { analyze(&app, audio).await })
        })
        .collect();
    let mut results = Vec::new();
    for h in handles {
        let (status, v) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        results.push(without_timing(v));
    }
    assert!(results.iter().all(|r| *r == results[0]));
    assert_eq!(results[0]["cough_detected"], true);
}

#[tokio::test]
async fn uploads_are_stored_only_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let mut st = state();
    st.store_dir = Some(store.clone());
    let app = router(st, LIMIT);

    let (status, _) = analyze(&app, cough()).await;
    assert_eq!(status, StatusCode::OK);
    let (status, _) = send(&app, "/analyze?store=false", cough(), "audio/wav").await;
    assert_eq!(status, StatusCode::OK);
    assert!(!store.exists());

    let (status, _) = send(&app, "/analyze?store=true", cough(), "audio/wav").await;
    assert_eq!(status, StatusCode::OK);
    let mut names: Vec<String> =
        std::fs::read_dir(&store).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 2);
    assert!(names[0].ends_with(".json") && names[1].ends_with(".wav"));
}

#[tokio::test]
async fn health_reports_the_model_version() {
    let app = router(state(), LIMIT);
    let req = Request::get("/health").body(Body::empty()).unwrap();
    let resp = app.oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["model_version"], "sha256:test");
}

#[test]
fn mismatched_models_are_refused() {
    let three = ModelWeights::init(ModelConfig { n_classes: 3, ..ModelConfig::default() }, 0).unwrap();
    assert!(AppState::new(three, "x".into(), PipelineConfig::default(), 1).is_err());
    let flat = ModelWeights::init(ModelConfig::with_channels(1), 0).unwrap();
    assert!(AppState::new(flat, "x".into(), PipelineConfig::default(), 1).is_err());
}
