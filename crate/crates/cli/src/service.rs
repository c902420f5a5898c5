//! HTTP inference service: landmark prediction and landmark-conditioned
//! inpainting over base64 PNG payloads.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use facefill::imaging::{
    apply_mask, composite, decode_image, decode_mask, encode_png, resize_image, resize_mask_nearest, Image,
    LandmarkSet, Mask, NUM_LANDMARKS,
};
use facefill::pipeline::Pipeline;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Request bodies above this size are rejected with 413.
    pub max_body_bytes: usize,
    /// Forward passes allowed to run at once; further requests wait.
    pub max_concurrent: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_body_bytes: 16 * 1024 * 1024,
            max_concurrent: 2,
        }
    }
}

#[derive(Clone)]
pub struct AppState {
    pipeline: Option<Arc<Pipeline>>,
    permits: Arc<Semaphore>,
}

impl AppState {
    pub fn new(pipeline: Option<Pipeline>, config: &ServiceConfig) -> Self {
        Self {
            pipeline: pipeline.map(Arc::new),
            permits: Arc::new(Semaphore::new(config.max_concurrent.max(1))),
        }
    }
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/predict-landmarks", post(predict_landmarks))
        .route("/inpaint", post(inpaint))
        .layer(DefaultBodyLimit::max(config.max_body_bytes))
        .with_state(state)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
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

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }

    fn unavailable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message)
    }

    fn code(&self) -> &'static str {
        match self.status {
            StatusCode::BAD_REQUEST => "bad_request",
            StatusCode::PAYLOAD_TOO_LARGE => "payload_too_large",
            StatusCode::UNPROCESSABLE_ENTITY => "wrong_dimensions",
            StatusCode::SERVICE_UNAVAILABLE => "model_not_loaded",
            _ => "internal",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code().to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<BytesRejection> for ApiError {
    fn from(r: BytesRejection) -> Self {
        if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            Self::new(StatusCode::PAYLOAD_TOO_LARGE, "request body exceeds the configured limit")
        } else {
            Self::bad_request(r.body_text())
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_fingerprint: Option<String>,
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(match &state.pipeline {
        Some(p) => Health {
            status: "ok".into(),
            model_fingerprint: Some(p.fingerprint().to_string()),
        },
        None => Health {
            status: "no_model".into(),
            model_fingerprint: None,
        },
    })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub landmarks: Vec<[f32; 2]>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintRequest {
    pub image: String,
    pub mask: String,
    #[serde(default)]
    pub landmarks: Option<Vec<[f32; 2]>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct InpaintResponse {
    pub image: String,
    pub landmarks_used: Vec<[f32; 2]>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body?;
    serde_json::from_slice(&bytes).map_err(|e| ApiError::bad_request(format!("malformed JSON payload: {e}")))
}

fn decode_b64(field: &str, value: &str) -> Result<Vec<u8>, ApiError> {
    // Accept data URLs as produced by browser canvases.
    let raw = value.split_once(";base64,").map_or(value, |(_, rest)| rest);
    STANDARD
        .decode(raw.trim())
        .map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

fn decode_inputs(image: &str, mask: &str) -> Result<(Image, Mask), ApiError> {
    let image = decode_image(&decode_b64("image", image)?)
        .map_err(|e| ApiError::bad_request(format!("image: {e}")))?;
    let mask =
        decode_mask(&decode_b64("mask", mask)?).map_err(|e| ApiError::bad_request(format!("mask: {e}")))?;
    if image.dims() != mask.dims() {
        return Err(ApiError::unprocessable(format!(
            "mask is {}x{} but the image is {}x{}",
            mask.height(),
            mask.width(),
            image.height(),
            image.width()
        )));
    }
    Ok((image, mask))
}

fn parse_landmarks(points: Vec<[f32; 2]>) -> Result<LandmarkSet, ApiError> {
    if points.len() != NUM_LANDMARKS {
        return Err(ApiError::unprocessable(format!(
            "expected {NUM_LANDMARKS} landmarks, got {}",
            points.len()
        )));
    }
    LandmarkSet::new(points).map_err(|e| ApiError::bad_request(format!("landmarks: {e}")))
}

/// Placement of a native frame inside the square model frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub size: usize,
    pub height: usize,
    pub width: usize,
    /// Content extent inside the model frame.
    pub inner_h: usize,
    pub inner_w: usize,
    pub top: usize,
    pub left: usize,
}

impl Letterbox {
    /// Scales the longer side to `size` and centers the content.
    pub fn new(height: usize, width: usize, size: usize) -> Self {
        let scale = size as f64 / height.max(width) as f64;
        let inner_h = ((height as f64 * scale).round() as usize).clamp(1, size);
        let inner_w = ((width as f64 * scale).round() as usize).clamp(1, size);
        Self {
            size,
            height,
            width,
            inner_h,
            inner_w,
            top: (size - inner_h) / 2,
            left: (size - inner_w) / 2,
        }
    }

    pub fn image_in(&self, image: &Image) -> Image {
        let inner = resize_image(image, self.inner_h, self.inner_w);
        Image::from_fn(self.size, self.size, |y, x| self.inner_pos(y, x).map_or([0.0; 3], |(iy, ix)| inner.pixel(iy, ix)))
    }

    /// Padding counts as known context.
    pub fn mask_in(&self, mask: &Mask) -> Mask {
        let inner = resize_mask_nearest(mask, self.inner_h, self.inner_w);
        Mask::from_fn(self.size, self.size, |y, x| self.inner_pos(y, x).is_some_and(|(iy, ix)| inner.is_hole(iy, ix)))
    }

    pub fn image_out(&self, model: &Image) -> Image {
        let inner = Image::from_fn(self.inner_h, self.inner_w, |y, x| model.pixel(y + self.top, x + self.left));
        resize_image(&inner, self.height, self.width)
    }

    pub fn landmarks_in(&self, l: &LandmarkSet) -> LandmarkSet {
        let s = self.size as f32;
        l.map(|[x, y]| {
            [
                (x * self.inner_w as f32 + self.left as f32) / s,
                (y * self.inner_h as f32 + self.top as f32) / s,
            ]
        })
    }

    pub fn landmarks_out(&self, l: &LandmarkSet) -> LandmarkSet {
        let s = self.size as f32;
        l.map(|[x, y]| {
            [
                (x * s - self.left as f32) / self.inner_w as f32,
                (y * s - self.top as f32) / self.inner_h as f32,
            ]
        })
    }

    fn inner_pos(&self, y: usize, x: usize) -> Option<(usize, usize)> {
        let (iy, ix) = (y.checked_sub(self.top)?, x.checked_sub(self.left)?);
        (iy < self.inner_h && ix < self.inner_w).then_some((iy, ix))
    }
}

fn predict_native(pipeline: &Pipeline, image: &Image, mask: &Mask) -> Result<LandmarkSet, ApiError> {
    if !pipeline.has_landmark_model() {
        return Err(ApiError::unavailable("no landmark model is loaded"));
    }
    let lb = Letterbox::new(image.height(), image.width(), pipeline.image_size());
    let corrupted = apply_mask(&lb.image_in(image), &lb.mask_in(mask)).map_err(|e| ApiError::internal(e.to_string()))?;
    let model = pipeline
        .predict_landmarks(&corrupted)
        .map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(lb.landmarks_out(&model))
}

fn inpaint_native(
    pipeline: &Pipeline,
    image: &Image,
    mask: &Mask,
    landmarks: Option<LandmarkSet>,
) -> Result<(Image, LandmarkSet), ApiError> {
    let landmarks = match landmarks {
        Some(l) => l,
        None => predict_native(pipeline, image, mask)?,
    };
    let lb = Letterbox::new(image.height(), image.width(), pipeline.image_size());
    let internal = |e: facefill::Error| ApiError::internal(e.to_string());
    let out = pipeline
        .inpaint(&lb.image_in(image), &lb.mask_in(mask), Some(&lb.landmarks_in(&landmarks)))
        .map_err(internal)?;
    let filled = lb.image_out(out.completed.pixels());
    // Composite at native resolution so observed pixels are returned untouched.
    let completed = composite(&filled, image, mask).map_err(internal)?.into_image();
    Ok((completed, landmarks))
}

async fn run_blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Pipeline) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let pipeline = state
        .pipeline
        .clone()
        .ok_or_else(|| ApiError::unavailable("no model is loaded"))?;
    let _permit = state
        .permits
        .clone()
        .acquire_owned()
        .await
        .map_err(|_| ApiError::unavailable("service is shutting down"))?;
    tokio::task::spawn_blocking(move || f(&pipeline))
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn predict_landmarks(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let req: PredictRequest = parse_json(body)?;
    if state.pipeline.is_none() {
        return Err(ApiError::unavailable("no model is loaded"));
    }
    let (image, mask) = decode_inputs(&req.image, &req.mask)?;
    let landmarks = run_blocking(&state, move |p| predict_native(p, &image, &mask)).await?;
    Ok(Json(PredictResponse {
        landmarks: landmarks.points().to_vec(),
    }))
}

async fn inpaint(
    State(state): State<AppState>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<InpaintResponse>, ApiError> {
    let req: InpaintRequest = parse_json(body)?;
    if state.pipeline.is_none() {
        return Err(ApiError::unavailable("no model is loaded"));
    }
    let (image, mask) = decode_inputs(&req.image, &req.mask)?;
    let landmarks = req.landmarks.map(parse_landmarks).transpose()?;
    let (completed, used) = run_blocking(&state, move |p| inpaint_native(p, &image, &mask, landmarks)).await?;
    let png = encode_png(&completed).map_err(|e| ApiError::internal(e.to_string()))?;
    Ok(Json(InpaintResponse {
        image: STANDARD.encode(png),
        landmarks_used: used.points().to_vec(),
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn letterbox_geometry() {
        let lb = Letterbox::new(100, 50, 64);
        assert_eq!((lb.inner_h, lb.inner_w, lb.top, lb.left), (64, 32, 0, 16));
        let img = Image::filled(100, 50, 0.5);
        let boxed = lb.image_in(&img);
        assert_eq!(boxed.pixel(10, 0), [0.0; 3]);
        assert!((boxed.pixel(10, 30)[0] - 0.5).abs() < 1e-6);
        assert_eq!(lb.image_out(&boxed).dims(), (100, 50));
        let full = lb.mask_in(&Mask::ones(100, 50));
        assert_eq!(full.hole_count(), 64 * 32);
    }

    #[test]
    fn landmark_mapping_round_trips() {
        let lb = Letterbox::new(30, 80, 64);
        let l = LandmarkSet::uniform(0.25, 0.75);
        let back = lb.landmarks_out(&lb.landmarks_in(&l));
        for (a, b) in back.points().iter().zip(l.points()) {
            assert!((a[0] - b[0]).abs() < 1e-5 && (a[1] - b[1]).abs() < 1e-5);
        }
    }
}
