//! HTTP endpoints. Bodies of POST requests are line-delimited JSON.

use std::collections::BTreeSet;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use maqi_core::guidance::{Advisory, GuidanceError, ProfileClass, RouteQuery, UserProfile};
use maqi_core::model::parse_timestamp;
use maqi_core::physio::RawPhysio;
use maqi_core::{BoundingBox, GeoPoint, Quadkey, TimeSlot};
use serde::{Deserialize, Serialize};

use crate::state::{Service, ServiceError};

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = match &self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::UnknownSlot(_) | ServiceError::NoData(_) => StatusCode::NOT_FOUND,
            ServiceError::SlotStillOpen(_) => StatusCode::CONFLICT,
            ServiceError::Guidance(GuidanceError::NoRoute) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::Guidance(_) => StatusCode::BAD_REQUEST,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = serde_json::json!({ "error": self.name(), "message": self.to_string() });
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ServiceError>;

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/samples", post(post_samples))
        .route("/physio", post(post_physio).get(get_physio))
        .route("/batches", post(post_batches))
        .route("/fuse", post(post_fuse))
        .route("/maqi", get(get_maqi))
        .route("/aqi", get(get_aqi))
        .route("/advisory", get(get_advisory))
        .route("/route", get(get_route))
        .with_state(service)
}

fn bad(msg: impl Into<String>) -> ServiceError {
    ServiceError::BadRequest(msg.into())
}

fn parse_slot(service: &Service, s: &str) -> Result<TimeSlot, ServiceError> {
    let ts = parse_timestamp("slot", s).map_err(|e| bad(e.to_string()))?;
    Ok(service.slot_of(ts))
}

fn parse_point(field: &str, s: &str) -> Result<GeoPoint, ServiceError> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [lon, lat] = parts[..] else {
        return Err(bad(format!("{field} must be \"lon,lat\"")));
    };
    let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("{field}: {v:?} is not a number")));
    GeoPoint::new(num(lon)?, num(lat)?).map_err(|e| bad(e.to_string()))
}

fn parse_bbox(s: &str) -> Result<BoundingBox, ServiceError> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|_| bad(format!("bbox: {x:?} is not a number"))))
        .collect::<Result<_, _>>()?;
    let [a, b, c, d] = v[..] else {
        return Err(bad("bbox must be \"min_lon,min_lat,max_lon,max_lat\""));
    };
    BoundingBox::new(a, b, c, d).map_err(|e| bad(e.to_string()))
}

fn parse_time(field: &'static str, s: Option<&str>) -> Result<Option<DateTime<Utc>>, ServiceError> {
    s.map(|s| parse_timestamp(field, s).map_err(|e| bad(e.to_string()))).transpose()
}

async fn health(State(s): State<Arc<Service>>) -> impl IntoResponse {
    Json(s.health())
}

async fn post_samples(State(s): State<Arc<Service>>, body: String) -> impl IntoResponse {
    s.ingest_samples(&body).map(Json)
}

async fn post_physio(State(s): State<Arc<Service>>, body: String) -> impl IntoResponse {
    s.ingest_physio(&body).map(Json)
}

#[derive(Serialize)]
struct MergeResponse {
    outcome: &'static str,
}

async fn post_batches(State(s): State<Arc<Service>>, body: String) -> ApiResult<MergeResponse> {
    let outcome = match s.merge_batch(&body)? {
        maqi_core::edge::MergeOutcome::Applied => "applied",
        maqi_core::edge::MergeOutcome::AlreadyApplied => "already_applied",
    };
    Ok(Json(MergeResponse { outcome }))
}

#[derive(Deserialize)]
struct SlotParams {
    slot: String,
}

async fn post_fuse(State(s): State<Arc<Service>>, Query(q): Query<SlotParams>) -> impl IntoResponse {
    let slot = parse_slot(&s, &q.slot)?;
    s.fuse_slot(slot, Utc::now()).map(Json)
}

#[derive(Deserialize)]
struct MaqiParams {
    slot: String,
    bbox: Option<String>,
}

async fn get_maqi(State(s): State<Arc<Service>>, Query(q): Query<MaqiParams>) -> impl IntoResponse {
    let slot = parse_slot(&s, &q.slot)?;
    let area = q.bbox.as_deref().map(parse_bbox).transpose()?;
    s.maqi(slot, area).map(Json)
}

#[derive(Deserialize)]
struct PointParams {
    slot: String,
    lon: f64,
    lat: f64,
    profile: Option<String>,
    #[serde(default)]
    indoor: bool,
}

async fn get_aqi(State(s): State<Arc<Service>>, Query(q): Query<PointParams>) -> impl IntoResponse {
    let slot = parse_slot(&s, &q.slot)?;
    let p = GeoPoint::new(q.lon, q.lat).map_err(|e| bad(e.to_string()))?;
    s.aqi_at(slot, p).map(Json)
}

#[derive(Serialize)]
struct AdvisoryResponse {
    #[serde(flatten)]
    advisory: Advisory,
    message: String,
    warning: bool,
}

async fn get_advisory(State(s): State<Arc<Service>>, Query(q): Query<PointParams>) -> ApiResult<AdvisoryResponse> {
    let slot = parse_slot(&s, &q.slot)?;
    let p = GeoPoint::new(q.lon, q.lat).map_err(|e| bad(e.to_string()))?;
    let class: ProfileClass = q.profile.as_deref().unwrap_or("general").parse()?;
    let profile = UserProfile { class, indoor: q.indoor };
    let advisory = s.advisory(slot, p, &profile)?;
    let message = s.catalog().text(&advisory).to_string();
    Ok(Json(AdvisoryResponse { warning: advisory.is_warning(), message, advisory }))
}

#[derive(Deserialize)]
struct RouteParams {
    slot: String,
    from: String,
    to: String,
    #[serde(default)]
    alpha: f64,
    avoid: Option<String>,
}

async fn get_route(State(s): State<Arc<Service>>, Query(q): Query<RouteParams>) -> impl IntoResponse {
    let slot = parse_slot(&s, &q.slot)?;
    let avoid: BTreeSet<Quadkey> = q
        .avoid
        .as_deref()
        .unwrap_or("")
        .split(',')
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .map(|k| k.parse().map_err(|_| bad(format!("avoid: invalid quadkey {k:?}"))))
        .collect::<Result<_, _>>()?;
    let query = RouteQuery { start: parse_point("from", &q.from)?, goal: parse_point("to", &q.to)?, alpha: q.alpha, avoid };
    s.route(slot, &query).map(Json)
}

#[derive(Deserialize)]
struct PhysioParams {
    resident: Option<String>,
    from: Option<String>,
    to: Option<String>,
}

async fn get_physio(State(s): State<Arc<Service>>, Query(q): Query<PhysioParams>) -> ApiResult<Vec<RawPhysio>> {
    let from = parse_time("from", q.from.as_deref())?;
    let to = parse_time("to", q.to.as_deref())?;
    Ok(Json(s.physio(q.resident.as_deref(), from, to).iter().map(RawPhysio::from).collect()))
}
