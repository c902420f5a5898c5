use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use candle_core::Device;
use serde_json::{json, Value};
use tower::ServiceExt;

use facefill::data::synthetic_faces;
use facefill::imaging::{decode_image, encode_mask_png, encode_png, Image, Mask};
use facefill::pipeline::Pipeline;
use facefill::train::{InpaintTrainer, LandmarkTrainer, MaskKind, TrainConfig};
use facefill_cli::service::{router, AppState, ErrorBody, Health, InpaintResponse, PredictResponse, ServiceConfig};

fn pipeline() -> Pipeline {
    let dev = Device::Cpu;
    let cfg = TrainConfig {
        image_size: 32,
        mask_source: MaskKind::Center,
        ..TrainConfig::desk()
    };
    let lm = LandmarkTrainer::new(cfg.clone(), &dev).unwrap().checkpoint().unwrap();
    let inp = InpaintTrainer::new(cfg, None, &dev).unwrap().checkpoint().unwrap();
    Pipeline::from_checkpoints(&inp, Some(&lm), &dev).unwrap()
}

fn app_with(pipeline: Option<Pipeline>, cfg: ServiceConfig) -> Router {
    router(AppState::new(pipeline, &cfg), &cfg)
}

fn app() -> Router {
    app_with(Some(pipeline()), ServiceConfig::default())
}

fn b64_image(img: &Image) -> String {
    STANDARD.encode(encode_png(img).unwrap())
}

fn b64_mask(m: &Mask) -> String {
    STANDARD.encode(encode_mask_png(m).unwrap())
}

fn face(h: usize, w: usize) -> Image {
    let f = synthetic_faces(1, 48, 3).get(0).image.clone();
    facefill::imaging::resize_image(&f, h, w)
}

async fn call(app: &Router, method: &str, uri: &str, body: Body) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body)
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    call(app, "POST", uri, Body::from(body.to_string())).await
}

fn error_code(v: Value) -> String {
    serde_json::from_value::<ErrorBody>(v).unwrap().code
}

#[tokio::test]
async fn health_reports_fingerprint() {
    let p = pipeline();
    let fp = p.fingerprint().to_string();
    let app = app_with(Some(p), ServiceConfig::default());
    let (s, v) = call(&app, "GET", "/health", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.model_fingerprint.as_deref(), Some(fp.as_str()));
}

#[tokio::test]
async fn zero_mask_returns_input_unchanged() {
    let app = app();
    let img = face(32, 32);
    let body = json!({"image": b64_image(&img), "mask": b64_mask(&Mask::zeros(32, 32))});
    let (s, v) = post(&app, "/inpaint", body).await;
    assert_eq!(s, StatusCode::OK);
    let r: InpaintResponse = serde_json::from_value(v).unwrap();
    let out = decode_image(&STANDARD.decode(r.image).unwrap()).unwrap();
    let back = decode_image(&encode_png(&img).unwrap()).unwrap();
    assert_eq!(out.data(), back.data());
    assert_eq!(r.landmarks_used.len(), 68);
}

#[tokio::test]
async fn omitted_landmarks_match_prediction() {
    let app = app();
    let img = face(40, 24);
    let mask = Mask::from_fn(40, 24, |y, x| (10..25).contains(&y) && (4..18).contains(&x));
    let payload = json!({"image": b64_image(&img), "mask": b64_mask(&mask)});
    let (s, v) = post(&app, "/predict-landmarks", payload.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let pred: PredictResponse = serde_json::from_value(v).unwrap();
    let (s, v) = post(&app, "/inpaint", payload.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let r: InpaintResponse = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(r.landmarks_used, pred.landmarks);

    let out = decode_image(&STANDARD.decode(&r.image).unwrap()).unwrap();
    assert_eq!(out.dims(), (40, 24));
    let orig = decode_image(&encode_png(&img).unwrap()).unwrap();
    for y in 0..40 {
        for x in 0..24 {
            if !mask.is_hole(y, x) {
                assert_eq!(out.pixel(y, x), orig.pixel(y, x));
            }
        }
    }
    let (_, again) = post(&app, "/inpaint", payload).await;
    assert_eq!(again, v, "responses are deterministic");
}

#[tokio::test]
async fn explicit_landmarks_are_echoed() {
    let app = app();
    let img = face(32, 32);
    let mut pts = facefill::data::template_landmarks().points().to_vec();
    pts[30] = [0.5, 0.7];
    let body = json!({
        "image": b64_image(&img),
        "mask": b64_mask(&Mask::from_fn(32, 32, |y, _| y > 16)),
        "landmarks": pts,
    });
    let (s, v) = post(&app, "/inpaint", body).await;
    assert_eq!(s, StatusCode::OK);
    let r: InpaintResponse = serde_json::from_value(v).unwrap();
    for (a, b) in r.landmarks_used.iter().zip(&pts) {
        assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
    }
}

#[tokio::test]
async fn malformed_payloads_are_400() {
    let app = app();
    let (s, v) = call(&app, "POST", "/inpaint", Body::from("{not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(error_code(v), "bad_request");
    let (s, _) = post(&app, "/inpaint", json!({"image": "@@@", "mask": "@@@"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let not_png = STANDARD.encode(b"plain text");
    let (s, _) = post(&app, "/predict-landmarks", json!({"image": not_png, "mask": not_png})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, "/predict-landmarks", json!({"image": b64_image(&face(32, 32))})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn dimension_problems_are_422() {
    let app = app();
    let body = json!({"image": b64_image(&face(32, 32)), "mask": b64_mask(&Mask::zeros(16, 32))});
    let (s, v) = post(&app, "/inpaint", body).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(error_code(v), "wrong_dimensions");
    let body = json!({
        "image": b64_image(&face(32, 32)),
        "mask": b64_mask(&Mask::zeros(32, 32)),
        "landmarks": vec![[0.5f32, 0.5]; 10],
    });
    let (s, _) = post(&app, "/inpaint", body).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn missing_model_is_503() {
    let app = app_with(None, ServiceConfig::default());
    let (s, v) = call(&app, "GET", "/health", Body::empty()).await;
    assert_eq!(s, StatusCode::OK);
    assert!(serde_json::from_value::<Health>(v).unwrap().model_fingerprint.is_none());
    let body = json!({"image": b64_image(&face(32, 32)), "mask": b64_mask(&Mask::zeros(32, 32))});
    let (s, v) = post(&app, "/inpaint", body.clone()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(error_code(v), "model_not_loaded");
    let (s, _) = post(&app, "/predict-landmarks", body).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn missing_landmark_model_is_503() {
    let dev = Device::Cpu;
    let cfg = TrainConfig {
        image_size: 32,
        mask_source: MaskKind::Center,
        ..TrainConfig::desk()
    };
    let inp = InpaintTrainer::new(cfg, None, &dev).unwrap().checkpoint().unwrap();
    let p = Pipeline::from_checkpoints(&inp, None, &dev).unwrap();
    let app = app_with(Some(p), ServiceConfig::default());
    let body = json!({"image": b64_image(&face(32, 32)), "mask": b64_mask(&Mask::zeros(32, 32))});
    let (s, _) = post(&app, "/predict-landmarks", body).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn oversized_body_is_413() {
    let cfg = ServiceConfig {
        max_body_bytes: 1024,
        ..ServiceConfig::default()
    };
    let app = app_with(None, cfg);
    let big = "A".repeat(4096);
    let (s, v) = post(&app, "/inpaint", json!({"image": big, "mask": ""})).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(error_code(v), "payload_too_large");
}
