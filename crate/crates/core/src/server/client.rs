//! Client-side access to the hub, either in process or over HTTP.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::service::{IngestOutcome, SubmitOutcome, UploadReport};
use super::state::{DeviceReport, DeviceStatus, Participant};
use super::survey::SurveyResponse;
use super::upload::UploadStatus;
use super::{Service, ServiceError};
use crate::policy::PromptEvent;
use crate::sensing::EnergyWindow;
use crate::ParticipantId;

/// What the watch and phone apps need from the hub.
pub trait Hub: Send + Sync {
    fn register(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError>;
    fn ingest(&self, window: &EnergyWindow) -> Result<IngestOutcome, ServiceError>;
    fn report_device(&self, report: &DeviceReport) -> Result<DeviceStatus, ServiceError>;
    fn open_upload(&self, pid: ParticipantId, total_bytes: u64, checksum: &str) -> Result<UploadStatus, ServiceError>;
    fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError>;
    fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError>;
    fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError>;
    fn pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError>;
    fn respond(&self, response: &SurveyResponse) -> Result<SubmitOutcome, ServiceError>;
}

impl Hub for Service {
    fn register(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError> {
        self.register_participant(alias, utc_offset_minutes)
    }

    fn ingest(&self, window: &EnergyWindow) -> Result<IngestOutcome, ServiceError> {
        self.ingest_window(window.clone())
    }

    fn report_device(&self, report: &DeviceReport) -> Result<DeviceStatus, ServiceError> {
        self.report_device_status(report.clone())
    }

    fn open_upload(&self, pid: ParticipantId, total_bytes: u64, checksum: &str) -> Result<UploadStatus, ServiceError> {
        Service::open_upload(self, pid, total_bytes, checksum)
    }

    fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError> {
        Service::put_chunk(self, session_id, offset, bytes)
    }

    fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
        Service::upload_status(self, session_id)
    }

    fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError> {
        Service::finish_upload(self, session_id)
    }

    fn pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
        self.deliver_pending(pid)
    }

    fn respond(&self, response: &SurveyResponse) -> Result<SubmitOutcome, ServiceError> {
        self.submit_response(&response.event_id, response.clone())
    }
}

/// Blocking JSON-over-HTTP client for a running `serve` instance.
pub struct HttpHub {
    base: String,
    agent: ureq::Agent,
}

#[derive(serde::Deserialize)]
struct ErrorBody {
    error: String,
    message: String,
}

impl HttpHub {
    pub fn new(base_url: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        HttpHub { base: base_url.trim_end_matches('/').to_string(), agent }
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn decode<T: DeserializeOwned>(
        resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ServiceError> {
        let mut resp = resp.map_err(|e| ServiceError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| ServiceError::Transport(e.to_string()))?;
        if (200..300).contains(&status) {
            let text = if text.trim().is_empty() { "null" } else { text.as_str() };
            return serde_json::from_str(text).map_err(|e| ServiceError::Transport(format!("bad response body: {e}")));
        }
        let (kind, message) = match serde_json::from_str::<ErrorBody>(&text) {
            Ok(b) => (b.error, b.message),
            Err(_) => ("http".to_string(), text),
        };
        Err(ServiceError::Remote { status, kind, message })
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T, ServiceError> {
        Self::decode(self.agent.get(&self.url(path)).call())
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<T, ServiceError> {
        let bytes = serde_json::to_vec(body).map_err(|e| ServiceError::Validation(e.to_string()))?;
        Self::decode(self.agent.post(&self.url(path)).header("content-type", "application/json").send(&bytes[..]))
    }
}

impl Hub for HttpHub {
    fn register(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError> {
        self.post(
            "/participants",
            &serde_json::json!({ "display_alias": alias, "utc_offset_minutes": utc_offset_minutes }),
        )
    }

    fn ingest(&self, window: &EnergyWindow) -> Result<IngestOutcome, ServiceError> {
        #[derive(serde::Deserialize)]
        struct R {
            outcome: IngestOutcome,
        }
        self.post::<_, R>("/windows", window).map(|r| r.outcome)
    }

    fn report_device(&self, report: &DeviceReport) -> Result<DeviceStatus, ServiceError> {
        self.post("/device-status", report)
    }

    fn open_upload(&self, pid: ParticipantId, total_bytes: u64, checksum: &str) -> Result<UploadStatus, ServiceError> {
        self.post(
            "/uploads",
            &serde_json::json!({ "participant_id": pid, "total_bytes": total_bytes, "checksum": checksum }),
        )
    }

    fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError> {
        let req = self
            .agent
            .put(&self.url(&format!("/uploads/{session_id}/chunks")))
            .header("upload-offset", offset.to_string())
            .header("content-type", "application/octet-stream");
        Self::decode(req.send(bytes))
    }

    fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
        self.get(&format!("/uploads/{session_id}"))
    }

    fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError> {
        self.post(&format!("/uploads/{session_id}/finish"), &serde_json::json!({}))
    }

    fn pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
        self.get(&format!("/participants/{}/pending", pid.get()))
    }

    fn respond(&self, response: &SurveyResponse) -> Result<SubmitOutcome, ServiceError> {
        self.post(&format!("/events/{}/response", response.event_id), response)
    }
}

/// Wraps a hub and injects transport faults into a deterministic fraction
/// of data-path calls. A faulty call either never reaches the hub, reaches
/// it but loses the reply, or (for chunks) delivers only a prefix.
pub struct FlakyHub<H> {
    inner: H,
    seed: u64,
    fail_per_mille: u64,
    calls: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fault {
    Pass,
    DropRequest,
    DropReply,
    Truncate,
}

impl<H: Hub> FlakyHub<H> {
    pub fn new(inner: H, seed: u64, fail_rate: f64) -> Self {
        FlakyHub { inner, seed, fail_per_mille: (fail_rate.clamp(0.0, 1.0) * 1000.0) as u64, calls: AtomicU64::new(0) }
    }

    pub fn inner(&self) -> &H {
        &self.inner
    }

    /// Points the wrapper at a new hub without restarting the fault sequence.
    pub fn replace_inner(&mut self, inner: H) -> H {
        std::mem::replace(&mut self.inner, inner)
    }

    fn fault(&self) -> Fault {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        let r = crate::policy::splitmix64(self.seed ^ n.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if r % 1000 >= self.fail_per_mille {
            return Fault::Pass;
        }
        match (r >> 20) % 3 {
            0 => Fault::DropRequest,
            1 => Fault::DropReply,
            _ => Fault::Truncate,
        }
    }

    fn guarded<T>(&self, f: impl FnOnce() -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        match self.fault() {
            Fault::Pass => f(),
            Fault::DropRequest => Err(ServiceError::Transport("connection refused".into())),
            Fault::DropReply | Fault::Truncate => {
                let _ = f();
                Err(ServiceError::Transport("connection reset after send".into()))
            }
        }
    }
}

impl<H: Hub> Hub for FlakyHub<H> {
    fn register(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError> {
        self.inner.register(alias, utc_offset_minutes)
    }

    fn ingest(&self, window: &EnergyWindow) -> Result<IngestOutcome, ServiceError> {
        self.guarded(|| self.inner.ingest(window))
    }

    fn report_device(&self, report: &DeviceReport) -> Result<DeviceStatus, ServiceError> {
        self.inner.report_device(report)
    }

    fn open_upload(&self, pid: ParticipantId, total_bytes: u64, checksum: &str) -> Result<UploadStatus, ServiceError> {
        self.guarded(|| self.inner.open_upload(pid, total_bytes, checksum))
    }

    fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError> {
        match self.fault() {
            Fault::Pass => self.inner.put_chunk(session_id, offset, bytes),
            Fault::DropRequest => Err(ServiceError::Transport("connection refused".into())),
            Fault::DropReply => {
                let _ = self.inner.put_chunk(session_id, offset, bytes);
                Err(ServiceError::Transport("connection reset after send".into()))
            }
            Fault::Truncate => {
                let _ = self.inner.put_chunk(session_id, offset, &bytes[..bytes.len() / 2]);
                Err(ServiceError::Transport("connection dropped mid-chunk".into()))
            }
        }
    }

    fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
        self.guarded(|| self.inner.upload_status(session_id))
    }

    fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError> {
        self.guarded(|| self.inner.finish_upload(session_id))
    }

    fn pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
        self.inner.pending(pid)
    }

    fn respond(&self, response: &SurveyResponse) -> Result<SubmitOutcome, ServiceError> {
        self.inner.respond(response)
    }
}

macro_rules! forward_hub {
    ($($ty:ty),*) => {$(
        impl<H: Hub + ?Sized> Hub for $ty {
            fn register(&self, alias: &str, utc_offset_minutes: i32) -> Result<Participant, ServiceError> {
                (**self).register(alias, utc_offset_minutes)
            }

            fn ingest(&self, window: &EnergyWindow) -> Result<IngestOutcome, ServiceError> {
                (**self).ingest(window)
            }

            fn report_device(&self, report: &DeviceReport) -> Result<DeviceStatus, ServiceError> {
                (**self).report_device(report)
            }

            fn open_upload(&self, pid: ParticipantId, total_bytes: u64, checksum: &str) -> Result<UploadStatus, ServiceError> {
                (**self).open_upload(pid, total_bytes, checksum)
            }

            fn put_chunk(&self, session_id: &str, offset: u64, bytes: &[u8]) -> Result<UploadStatus, ServiceError> {
                (**self).put_chunk(session_id, offset, bytes)
            }

            fn upload_status(&self, session_id: &str) -> Result<UploadStatus, ServiceError> {
                (**self).upload_status(session_id)
            }

            fn finish_upload(&self, session_id: &str) -> Result<UploadReport, ServiceError> {
                (**self).finish_upload(session_id)
            }

            fn pending(&self, pid: ParticipantId) -> Result<Vec<PromptEvent>, ServiceError> {
                (**self).pending(pid)
            }

            fn respond(&self, response: &SurveyResponse) -> Result<SubmitOutcome, ServiceError> {
                (**self).respond(response)
            }
        }
    )*};
}

forward_hub!(&H, std::sync::Arc<H>, Box<H>);
