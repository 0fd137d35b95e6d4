//! C ABI for embedding calmreminder in watch or phone firmware.
//!
//! Every function returns a `CrStatus`. On failure a description of the
//! error is available from `cr_last_error` on the same thread until the
//! next call. Objects are handed out as opaque pointers and released with
//! their matching `*_free` function. Strings returned through `char **`
//! out-parameters are owned by the caller and released with
//! `cr_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;

use calmreminder::calibration::{fit_points, predict, CalibrationError, CalibrationModel, Scope};
use calmreminder::policy::EventId;
use calmreminder::sensing::{compute_energy, AccelSample, EnergyWindow, LookbackFeature};
use calmreminder::server::{IngestOutcome, MetricsFilter, Service, ServiceConfig, ServiceError, SurveyResponse};
use calmreminder::time::{Clock, Timestamp, VirtualClock};
use calmreminder::ParticipantId;

/// Result code of every `cr_*` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CrStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8 or JSON.
    BadEncoding = 2,
    /// An argument was rejected by validation.
    InvalidArgument = 3,
    NotFound = 4,
    /// The request conflicts with stored state (duplicate, already answered, inactive).
    Conflict = 5,
    /// The prompt was answered after its expiry time.
    Expired = 6,
    /// Too few points to fit a model.
    NoFit = 7,
    /// The lookback feature does not have enough windows to predict from.
    InsufficientCoverage = 8,
    PermissionDenied = 9,
    Io = 10,
    /// A panic was caught at the boundary. The handle involved should be freed.
    Internal = 11,
}

/// One accelerometer reading in g.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct CrSample {
    pub t_ms: i64,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

/// Work done by one `cr_service_set_time` call.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct CrTickReport {
    pub prompts_sent: u64,
    pub expired: u64,
    pub models_fitted: u64,
}

/// A fitted calibration line.
pub struct CrModel {
    model: CalibrationModel,
}

/// An embedded service instance driven by a caller-controlled clock.
pub struct CrService {
    svc: Service,
    clock: Arc<VirtualClock>,
}

struct Failure {
    status: CrStatus,
    message: String,
}

impl Failure {
    fn new(status: CrStatus, message: impl Into<String>) -> Self {
        Failure { status, message: message.into() }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        let status = match &e {
            ServiceError::UnknownParticipant(_) | ServiceError::UnknownEvent(_) | ServiceError::UnknownSession(_) => {
                CrStatus::NotFound
            }
            ServiceError::DuplicateAlias(_)
            | ServiceError::Conflict(_)
            | ServiceError::NotPending { .. }
            | ServiceError::SessionClosed { .. }
            | ServiceError::Inactive(_) => CrStatus::Conflict,
            ServiceError::Expired { .. } => CrStatus::Expired,
            ServiceError::Validation(_)
            | ServiceError::Retroactive { .. }
            | ServiceError::Incomplete { .. }
            | ServiceError::ChecksumMismatch { .. } => CrStatus::InvalidArgument,
            ServiceError::PinNotSet | ServiceError::PinMismatch => CrStatus::PermissionDenied,
            ServiceError::Storage(_) | ServiceError::Transport(_) | ServiceError::Remote { .. } => CrStatus::Io,
        };
        Failure::new(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(message: &str) {
    let text = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = text);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CrStatus {
    set_last_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CrStatus::Ok,
        Ok(Err(failure)) => {
            set_last_error(&failure.message);
            failure.status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("internal error: {msg}"));
            CrStatus::Internal
        }
    }
}

fn non_null<'a, T>(ptr: *const T, name: &str) -> Result<&'a T, Failure> {
    // SAFETY: callers pass either null or a pointer obtained from this library / valid for reads.
    unsafe { ptr.as_ref() }.ok_or_else(|| Failure::new(CrStatus::NullArgument, format!("{name} is null")))
}

fn out<'a, T>(ptr: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    // SAFETY: callers pass either null or a pointer valid for writes.
    unsafe { ptr.as_mut() }.ok_or_else(|| Failure::new(CrStatus::NullArgument, format!("{name} is null")))
}

fn slice<'a, T>(ptr: *const T, len: usize, name: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(Failure::new(CrStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees `len` readable elements at `ptr`.
    Ok(unsafe { std::slice::from_raw_parts(ptr, len) })
}

fn text<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(Failure::new(CrStatus::NullArgument, format!("{name} is null")));
    }
    // SAFETY: the caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| Failure::new(CrStatus::BadEncoding, format!("{name} is not valid UTF-8")))
}

fn give_string(dst: *mut *mut c_char, value: String) -> Result<(), Failure> {
    let slot = out(dst, "out_json")?;
    let c = CString::new(value).map_err(|_| Failure::new(CrStatus::Internal, "string contains NUL"))?;
    *slot = c.into_raw();
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string(value).map_err(|e| Failure::new(CrStatus::Internal, e.to_string()))
}

/// Message describing the most recent failure on this thread, or an empty
/// string. The pointer stays valid until the next `cr_*` call on this thread.
#[no_mangle]
pub extern "C" fn cr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string returned through an out-parameter of this
/// library that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn cr_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// RMS energy of the samples in the 5-minute window starting at
/// `window_start_ms`. An empty window yields NaN energy and a count of 0.
///
/// # Safety
/// `samples` must point to `n` readable samples (or may be null when `n` is 0).
/// The out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_compute_energy(
    window_start_ms: i64,
    samples: *const CrSample,
    n: usize,
    out_energy: *mut f64,
    out_sample_count: *mut u32,
) -> CrStatus {
    guard(|| {
        let samples: Vec<AccelSample> =
            slice(samples, n, "samples")?.iter().map(|s| AccelSample::new(s.t_ms, s.ax, s.ay, s.az)).collect();
        let energy_slot = out(out_energy, "out_energy")?;
        let count_slot = out(out_sample_count, "out_sample_count")?;
        let w = compute_energy(ParticipantId::new(0), &samples, Timestamp::from_millis(window_start_ms))
            .map_err(|e| Failure::new(CrStatus::InvalidArgument, e.to_string()))?;
        *energy_slot = w.energy.unwrap_or(f64::NAN);
        *count_slot = w.sample_count;
        Ok(())
    })
}

/// Fits `rating = slope * energy + intercept` by least squares.
///
/// # Safety
/// `energy` and `rating` must each point to `n` readable values and
/// `out_model` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_fit(
    energy: *const f64,
    rating: *const f64,
    n: usize,
    out_model: *mut *mut CrModel,
) -> CrStatus {
    guard(|| {
        let xs = slice(energy, n, "energy")?;
        let ys = slice(rating, n, "rating")?;
        let slot = out(out_model, "out_model")?;
        let points: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
        let (slope, intercept) = fit_points(&points).map_err(|e| match e {
            CalibrationError::ColdStart { .. } => Failure::new(CrStatus::NoFit, e.to_string()),
            _ => Failure::new(CrStatus::InvalidArgument, e.to_string()),
        })?;
        let model = CalibrationModel {
            scope: Scope::Global,
            slope,
            intercept,
            n_train: n,
            fitted_at: Timestamp::from_millis(0),
        };
        *slot = Box::into_raw(Box::new(CrModel { model }));
        Ok(())
    })
}

/// Predicted rating clamped to 1..=5 for a lookback mean built from
/// `windows_present` windows. Fails with `InsufficientCoverage` when fewer
/// than `min_coverage` windows were present.
///
/// # Safety
/// `model` must be a live handle from `cr_model_fit`; `out_rating` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_predict(
    model: *const CrModel,
    mean_energy: f64,
    windows_present: u32,
    min_coverage: u32,
    out_rating: *mut f64,
) -> CrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        let slot = out(out_rating, "out_rating")?;
        if !mean_energy.is_finite() {
            return Err(Failure::new(CrStatus::InvalidArgument, "mean_energy is not finite"));
        }
        let feature = LookbackFeature { as_of: Timestamp::from_millis(0), mean_energy, windows_present };
        *slot = predict(&m.model, &feature, min_coverage).ok_or_else(|| {
            Failure::new(
                CrStatus::InsufficientCoverage,
                format!("{windows_present} windows present, need {min_coverage}"),
            )
        })?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; the out-pointers must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_model_params(
    model: *const CrModel,
    out_slope: *mut f64,
    out_intercept: *mut f64,
) -> CrStatus {
    guard(|| {
        let m = non_null(model, "model")?;
        *out(out_slope, "out_slope")? = m.model.slope;
        *out(out_intercept, "out_intercept")? = m.model.intercept;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from `cr_model_fit` not freed before.
#[no_mangle]
pub unsafe extern "C" fn cr_model_free(model: *mut CrModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Opens a service whose clock starts at `start_ms`. With a null `log_path`
/// the service keeps its state in memory only; otherwise every change is
/// appended to the file and an existing file is replayed first.
///
/// # Safety
/// `log_path` must be null or a NUL-terminated string; `out_service` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_open(
    log_path: *const c_char,
    start_ms: i64,
    study_seed: u64,
    out_service: *mut *mut CrService,
) -> CrStatus {
    guard(|| {
        let slot = out(out_service, "out_service")?;
        let clock = Arc::new(VirtualClock::new(Timestamp::from_millis(start_ms)));
        let config = ServiceConfig { study_seed, ..ServiceConfig::default() };
        let svc = if log_path.is_null() {
            Service::in_memory(config, clock.clone())
        } else {
            Service::open(Path::new(text(log_path, "log_path")?), config, clock.clone(), true)?
        };
        *slot = Box::into_raw(Box::new(CrService { svc, clock }));
        Ok(())
    })
}

/// Moves the service clock forward to `now_ms` and runs every scheduled
/// action up to it. The clock cannot move backwards. `out_report` may be null.
///
/// # Safety
/// `service` must be a live handle; `out_report` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_set_time(
    service: *const CrService,
    now_ms: i64,
    out_report: *mut CrTickReport,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let now = Timestamp::from_millis(now_ms);
        if now < s.clock.now() {
            return Err(Failure::new(CrStatus::InvalidArgument, format!("clock cannot move back to {now}")));
        }
        s.clock.set(now);
        let tick = s.svc.tick()?;
        // SAFETY: null or valid for writes, per the contract above.
        if let Some(r) = unsafe { out_report.as_mut() } {
            *r = CrTickReport {
                prompts_sent: tick.prompts_sent,
                expired: tick.expired,
                models_fitted: tick.models_fitted,
            };
        }
        Ok(())
    })
}

/// Enrolls a participant and returns the assigned id.
///
/// # Safety
/// `service` must be a live handle, `alias` a NUL-terminated string and
/// `out_participant` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_register(
    service: *const CrService,
    alias: *const c_char,
    utc_offset_minutes: i32,
    out_participant: *mut u32,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let alias = text(alias, "alias")?;
        let slot = out(out_participant, "out_participant")?;
        *slot = s.svc.register_participant(alias, utc_offset_minutes)?.id.get();
        Ok(())
    })
}

/// Stores one energy window. Pass NaN energy with a count of 0 for an absent
/// window. `out_duplicate` (may be null) is set to 1 when an identical window
/// was already stored.
///
/// # Safety
/// `service` must be a live handle; `out_duplicate` must be null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_ingest(
    service: *const CrService,
    participant: u32,
    window_start_ms: i64,
    energy: f64,
    sample_count: u32,
    out_duplicate: *mut u8,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let pid = ParticipantId::new(participant);
        let start = Timestamp::from_millis(window_start_ms);
        let window = if energy.is_nan() && sample_count == 0 {
            EnergyWindow::absent(pid, start)
        } else {
            EnergyWindow::present(pid, start, energy, sample_count)
        };
        let outcome = s.svc.ingest_window(window)?;
        // SAFETY: null or valid for writes, per the contract above.
        if let Some(d) = unsafe { out_duplicate.as_mut() } {
            *d = u8::from(outcome == IngestOutcome::Duplicate);
        }
        Ok(())
    })
}

/// Pending prompts of a participant as a JSON array, oldest first.
///
/// # Safety
/// `service` must be a live handle and `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_pending_json(
    service: *const CrService,
    participant: u32,
    out_json: *mut *mut c_char,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let pending = s.svc.deliver_pending(ParticipantId::new(participant))?;
        give_string(out_json, to_json(&pending)?)
    })
}

/// Submits a survey answer given as `{"event_id": ..., "items": {...}}` and
/// returns the resulting transition as JSON. `out_json` may be null.
///
/// # Safety
/// `service` must be a live handle, `response_json` a NUL-terminated string
/// and `out_json` null or valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_respond_json(
    service: *const CrService,
    response_json: *const c_char,
    out_json: *mut *mut c_char,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let body = text(response_json, "response_json")?;
        let response: SurveyResponse = serde_json::from_str(body)
            .map_err(|e| Failure::new(CrStatus::BadEncoding, format!("response_json: {e}")))?;
        let event_id = EventId::from(response.event_id.as_str());
        let outcome = s.svc.submit_response(&event_id, response)?;
        if out_json.is_null() {
            return Ok(());
        }
        give_string(out_json, to_json(&outcome)?)
    })
}

/// Prompt metrics per condition as JSON. `participant` 0 summarizes everyone.
///
/// # Safety
/// `service` must be a live handle and `out_json` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn cr_service_metrics_json(
    service: *const CrService,
    participant: u32,
    out_json: *mut *mut c_char,
) -> CrStatus {
    guard(|| {
        let s = non_null(service, "service")?;
        let filter = MetricsFilter {
            participant: (participant != 0).then(|| ParticipantId::new(participant)),
            ..Default::default()
        };
        give_string(out_json, to_json(&s.svc.metrics(filter))?)
    })
}

/// # Safety
/// `service` must be null or a handle from `cr_service_open` not freed before.
#[no_mangle]
pub unsafe extern "C" fn cr_service_free(service: *mut CrService) {
    if !service.is_null() {
        drop(unsafe { Box::from_raw(service) });
    }
}
