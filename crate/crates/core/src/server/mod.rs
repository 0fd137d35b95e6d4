//! The study hub: ingests energy windows, runs the prompting policy for
//! every participant, records survey answers and serves metrics.
//!
//! All state changes go through an append-only event log so a restarted
//! service replays to exactly the state it had.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{EventId, PolicyConfig, PromptState};
use crate::time::Timestamp;
use crate::ParticipantId;

mod client;
mod http;
mod metrics;
mod service;
mod state;
mod store;
pub mod survey;
mod upload;

pub use client::{FlakyHub, HttpHub, Hub};
pub use http::{router, serve, AppState};
pub use metrics::{summarize, ConditionMetrics, Counts, MetricsFilter, MetricsSummary, CALM_RATING_BELOW};
pub use service::{IngestOutcome, PromptRecord, Service, SubmitOutcome, TickReport, UploadReport};
pub use state::{DeviceReport, DeviceStatus, Participant, ParticipantState};
pub use store::{load_events, read_events, EventLog, StoredEvent};
pub use survey::{ItemValue, SurveyResponse};
pub use upload::{missing_ranges, sha256_hex, UploadSession, UploadState, UploadStatus, MAX_UPLOAD_BYTES};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown participant {0}")]
    UnknownParticipant(ParticipantId),
    #[error("participant {0} is not active")]
    Inactive(ParticipantId),
    #[error("alias {0:?} is already registered")]
    DuplicateAlias(String),
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("event {event_id} expired at {expires_at}")]
    Expired { event_id: EventId, expires_at: Timestamp },
    #[error("event {event_id} is already {state}")]
    NotPending { event_id: EventId, state: PromptState },
    #[error("unknown event {0}")]
    UnknownEvent(EventId),
    #[error("switch effective at {effective_at} is before now ({now})")]
    Retroactive { effective_at: Timestamp, now: Timestamp },
    #[error("unknown upload session {0}")]
    UnknownSession(String),
    #[error("incomplete: missing {}", fmt_ranges(.missing))]
    Incomplete { missing: Vec<(u64, u64)> },
    #[error("checksum mismatch: expected {expected}, got {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("upload session {session_id} is {state:?}")]
    SessionClosed { session_id: String, state: UploadState },
    #[error("no PIN has been set")]
    PinNotSet,
    #[error("PIN does not match")]
    PinMismatch,
    #[error("storage: {0}")]
    Storage(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("remote error {status} ({kind}): {message}")]
    Remote { status: u16, kind: String, message: String },
}

fn fmt_ranges(ranges: &[(u64, u64)]) -> String {
    ranges.iter().map(|(a, b)| format!("[{a},{b})")).collect::<Vec<_>>().join(", ")
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Storage(e.to_string())
    }
}

impl ServiceError {
    /// Stable machine-readable error kind.
    pub fn kind(&self) -> &str {
        match self {
            ServiceError::UnknownParticipant(_) => "unknown_participant",
            ServiceError::Inactive(_) => "inactive",
            ServiceError::DuplicateAlias(_) => "duplicate_alias",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::Validation(_) => "validation",
            ServiceError::Expired { .. } => "expired",
            ServiceError::NotPending { .. } => "not_pending",
            ServiceError::UnknownEvent(_) => "unknown_event",
            ServiceError::Retroactive { .. } => "retroactive",
            ServiceError::UnknownSession(_) => "unknown_session",
            ServiceError::Incomplete { .. } => "incomplete",
            ServiceError::ChecksumMismatch { .. } => "checksum_mismatch",
            ServiceError::SessionClosed { .. } => "session_closed",
            ServiceError::PinNotSet => "pin_not_set",
            ServiceError::PinMismatch => "pin_mismatch",
            ServiceError::Storage(_) => "storage",
            ServiceError::Transport(_) => "transport",
            ServiceError::Remote { kind, .. } => kind,
        }
    }

    pub fn http_status(&self) -> u16 {
        match self {
            ServiceError::UnknownParticipant(_) | ServiceError::UnknownEvent(_) | ServiceError::UnknownSession(_) => {
                404
            }
            ServiceError::DuplicateAlias(_)
            | ServiceError::Conflict(_)
            | ServiceError::NotPending { .. }
            | ServiceError::SessionClosed { .. }
            | ServiceError::Inactive(_) => 409,
            ServiceError::Expired { .. } => 410,
            ServiceError::Validation(_)
            | ServiceError::Retroactive { .. }
            | ServiceError::Incomplete { .. }
            | ServiceError::ChecksumMismatch { .. } => 422,
            ServiceError::PinNotSet | ServiceError::PinMismatch => 403,
            ServiceError::Storage(_) => 500,
            ServiceError::Transport(_) => 503,
            ServiceError::Remote { status, .. } => *status,
        }
    }

    /// Whether a client should retry the same request later.
    pub fn is_transient(&self) -> bool {
        matches!(self, ServiceError::Transport(_))
            || matches!(self, ServiceError::Remote { status, .. } if *status >= 500)
    }
}

/// Settings fixed for the lifetime of a study; recorded as the first log entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub study_seed: u64,
    pub policy: PolicyConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { study_seed: 42, policy: PolicyConfig::default() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    #[default]
    System,
    /// Time only moves through `POST /clock`.
    Virtual,
}

/// `serve` configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub listen: String,
    pub data_path: PathBuf,
    pub clock_mode: ClockMode,
    /// Start time of the virtual clock, in ms since the epoch.
    pub virtual_start_ms: Option<i64>,
    /// Seconds between scheduler ticks under the system clock.
    pub tick_interval_secs: u64,
    /// fsync every log append.
    pub sync_writes: bool,
    pub study: ServiceConfig,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:8080".into(),
            data_path: PathBuf::from("data/events.ndjson"),
            clock_mode: ClockMode::System,
            virtual_start_ms: None,
            tick_interval_secs: 30,
            sync_writes: false,
            study: ServiceConfig::default(),
        }
    }
}

/// Environment variable that overrides `data_path`.
pub const DATA_PATH_ENV: &str = "CALMREMINDER_DATA";

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let mut cfg: ServerConfig = toml::from_str(text).map_err(|e| ServiceError::Validation(e.to_string()))?;
        cfg.apply_env();
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(p) = std::env::var_os(DATA_PATH_ENV).filter(|p| !p.is_empty()) {
            self.data_path = PathBuf::from(p);
        }
    }
}
