//! JSON-over-HTTP interface to the service.

use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;

use super::metrics::MetricsFilter;
use super::state::DeviceReport;
use super::survey::SurveyResponse;
use super::{ClockMode, ServerConfig, Service, ServiceError};
use crate::calibration::CalibrationModel;
use crate::policy::{Condition, EventId};
use crate::sensing::EnergyWindow;
use crate::time::{Clock, SystemClock, Timestamp, VirtualClock};
use crate::ParticipantId;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<Service>,
    /// Present when time is driven through `POST /clock`.
    pub virtual_clock: Option<VirtualClock>,
}

struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        let mut body = json!({ "error": self.0.kind(), "message": self.0.to_string() });
        if let ServiceError::Incomplete { missing } = &self.0 {
            body["missing"] = json!(missing);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// JSON request body whose parse errors use the API error shape.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(Body(value)),
            Err(rejection) => Err(bad(rejection.body_text())),
        }
    }
}

fn bad(msg: impl Into<String>) -> ApiError {
    ApiError(ServiceError::Validation(msg.into()))
}

fn pid(raw: &str) -> ApiResult<ParticipantId> {
    raw.parse().map_err(|_| bad(format!("invalid participant id {raw:?}")))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({ "ok": true })) }))
        .route("/participants", post(register).get(list_participants))
        .route("/participants/{id}", get(get_participant))
        .route("/participants/{id}/pending", get(pending))
        .route("/participants/{id}/events", get(participant_events))
        .route("/participants/{id}/condition", post(switch_condition))
        .route("/participants/{id}/device", get(device_status))
        .route("/participants/{id}/pin", post(set_pin))
        .route("/participants/{id}/stop", post(stop_recording))
        .route("/participants/{id}/active", post(set_active))
        .route("/windows", post(ingest))
        .route("/device-status", post(device_report))
        .route("/uploads", post(open_upload))
        .route("/uploads/{id}", get(upload_status))
        .route("/uploads/{id}/chunks", put(put_chunk))
        .route("/uploads/{id}/finish", post(finish_upload))
        .route("/events/{id}", get(get_event))
        .route("/events/{id}/response", post(respond))
        .route("/events.ndjson", get(export_events))
        .route("/metrics", get(metrics))
        .route("/models", get(models).post(publish_models))
        .route("/models/fit", post(fit_models))
        .route("/labels", get(labels))
        .route("/tick", post(tick))
        .route("/clock", get(get_clock).post(set_clock))
        .with_state(state)
}

#[derive(Deserialize)]
struct RegisterBody {
    display_alias: String,
    #[serde(default)]
    utc_offset_minutes: i32,
}

async fn register(State(s): State<AppState>, Body(b): Body<RegisterBody>) -> ApiResult<impl IntoResponse> {
    let p = s.service.register_participant(&b.display_alias, b.utc_offset_minutes)?;
    Ok((StatusCode::CREATED, Json(p)))
}

async fn list_participants(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.service.participants())
}

async fn get_participant(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = pid(&id)?;
    let participant = s.service.participant(id)?;
    let device = s.service.device_status(id)?;
    let now = s.service.now();
    let condition = s.service.condition_at(id, now)?;
    Ok(Json(json!({ "participant": participant, "device": device, "condition_now": condition })))
}

async fn pending(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.deliver_pending(pid(&id)?)?))
}

async fn participant_events(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.events(pid(&id)?)?))
}

#[derive(Deserialize)]
struct SwitchBody {
    condition: String,
    effective_at: Option<Timestamp>,
}

async fn switch_condition(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(b): Body<SwitchBody>,
) -> ApiResult<impl IntoResponse> {
    let condition: Condition = b.condition.parse().map_err(|e: crate::policy::PolicyError| bad(e.to_string()))?;
    let at = b.effective_at.unwrap_or_else(|| s.service.now());
    s.service.switch_condition(pid(&id)?, condition, at)?;
    Ok(Json(json!({ "condition": condition, "effective_at": at })))
}

async fn device_status(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.device_status(pid(&id)?)?))
}

async fn device_report(State(s): State<AppState>, Body(r): Body<DeviceReport>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.report_device_status(r)?))
}

#[derive(Deserialize)]
struct PinBody {
    pin: String,
}

async fn set_pin(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(b): Body<PinBody>,
) -> ApiResult<impl IntoResponse> {
    s.service.set_pin(pid(&id)?, &b.pin)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn stop_recording(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(b): Body<PinBody>,
) -> ApiResult<impl IntoResponse> {
    s.service.stop_recording(pid(&id)?, &b.pin)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Deserialize)]
struct ActiveBody {
    active: bool,
}

async fn set_active(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(b): Body<ActiveBody>,
) -> ApiResult<impl IntoResponse> {
    s.service.set_active(pid(&id)?, b.active)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn ingest(State(s): State<AppState>, Body(w): Body<EnergyWindow>) -> ApiResult<impl IntoResponse> {
    let outcome = s.service.ingest_window(w)?;
    Ok(Json(json!({ "outcome": outcome })))
}

#[derive(Deserialize)]
struct OpenUploadBody {
    participant_id: ParticipantId,
    total_bytes: u64,
    checksum: String,
}

async fn open_upload(State(s): State<AppState>, Body(b): Body<OpenUploadBody>) -> ApiResult<impl IntoResponse> {
    let status = s.service.open_upload(b.participant_id, b.total_bytes, &b.checksum)?;
    Ok((StatusCode::CREATED, Json(status)))
}

async fn upload_status(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.upload_status(&id)?))
}

async fn put_chunk(
    State(s): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    let offset = headers
        .get("upload-offset")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .ok_or_else(|| bad("missing or invalid Upload-Offset header"))?;
    Ok(Json(s.service.put_chunk(&id, offset, &body)?))
}

async fn finish_upload(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    let report = tokio::task::spawn_blocking(move || svc.finish_upload(&id))
        .await
        .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))??;
    Ok(Json(report))
}

async fn get_event(State(s): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let id = EventId::from(id.as_str());
    let event = s.service.event(&id)?;
    let response = s.service.response(&id)?;
    Ok(Json(json!({ "event": event, "response": response })))
}

async fn respond(
    State(s): State<AppState>,
    Path(id): Path<String>,
    Body(r): Body<SurveyResponse>,
) -> ApiResult<impl IntoResponse> {
    Ok(Json(s.service.submit_response(&EventId::from(id.as_str()), r)?))
}

async fn export_events(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let mut buf = Vec::new();
    s.service.export_prompt_records(&mut buf)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], buf))
}

#[derive(Deserialize)]
struct MetricsQuery {
    participant: Option<String>,
    from_ms: Option<i64>,
    to_ms: Option<i64>,
}

async fn metrics(State(s): State<AppState>, Query(q): Query<MetricsQuery>) -> ApiResult<impl IntoResponse> {
    let filter = MetricsFilter {
        participant: q.participant.as_deref().map(pid).transpose()?,
        from: q.from_ms.map(Timestamp::from_millis),
        to: q.to_ms.map(Timestamp::from_millis),
    };
    Ok(Json(s.service.metrics(filter)))
}

async fn models(State(s): State<AppState>) -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/json")], s.service.registry_json())
}

#[derive(Deserialize)]
struct ModelsBody {
    models: Vec<CalibrationModel>,
}

async fn publish_models(State(s): State<AppState>, Body(b): Body<ModelsBody>) -> ApiResult<impl IntoResponse> {
    let n = b.models.len();
    s.service.publish_models(b.models)?;
    Ok(Json(json!({ "published": n })))
}

async fn fit_models(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(json!({ "models": s.service.fit_models()? })))
}

async fn labels(State(s): State<AppState>) -> impl IntoResponse {
    Json(s.service.labels())
}

async fn tick(State(s): State<AppState>) -> ApiResult<impl IntoResponse> {
    let svc = s.service.clone();
    let report = tokio::task::spawn_blocking(move || svc.tick())
        .await
        .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))??;
    Ok(Json(report))
}

async fn get_clock(State(s): State<AppState>) -> impl IntoResponse {
    Json(json!({ "now": s.service.now(), "virtual": s.virtual_clock.is_some() }))
}

#[derive(Deserialize)]
struct ClockBody {
    now: Timestamp,
}

/// Moves a virtual clock forward and runs the scheduler up to it.
async fn set_clock(State(s): State<AppState>, Body(b): Body<ClockBody>) -> ApiResult<impl IntoResponse> {
    let clock = s
        .virtual_clock
        .as_ref()
        .ok_or_else(|| ApiError(ServiceError::Conflict("service runs on the system clock".into())))?;
    if b.now < s.service.now() {
        return Err(bad("the clock only moves forward"));
    }
    clock.set(b.now);
    let svc = s.service.clone();
    let report = tokio::task::spawn_blocking(move || svc.tick())
        .await
        .map_err(|e| ApiError(ServiceError::Storage(e.to_string())))??;
    Ok(Json(report))
}

/// Runs the HTTP service until Ctrl-C.
pub async fn serve(config: ServerConfig) -> Result<(), ServiceError> {
    let (clock, virtual_clock): (Arc<dyn Clock>, _) = match config.clock_mode {
        ClockMode::System => (Arc::new(SystemClock), None),
        ClockMode::Virtual => {
            let start = config.virtual_start_ms.map_or_else(|| SystemClock.now(), Timestamp::from_millis);
            let vc = VirtualClock::new(start);
            (Arc::new(vc.clone()), Some(vc))
        }
    };
    let service = Arc::new(Service::open(&config.data_path, config.study.clone(), clock, config.sync_writes)?);
    tracing::info!(path = %config.data_path.display(), records = service.log_len(), "event log loaded");

    if virtual_clock.is_none() {
        let svc = service.clone();
        let every = Duration::from_secs(config.tick_interval_secs.max(1));
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(every);
            loop {
                interval.tick().await;
                let svc = svc.clone();
                match tokio::task::spawn_blocking(move || svc.tick()).await {
                    Ok(Err(e)) => tracing::error!("scheduler tick failed: {e}"),
                    Err(e) => tracing::error!("scheduler task panicked: {e}"),
                    Ok(Ok(_)) => {}
                }
            }
        });
    }

    let app = router(AppState { service, virtual_clock });
    let listener = tokio::net::TcpListener::bind(&config.listen).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
