//! Append-only event log. Every state change the service makes is one
//! JSON line; replaying the lines rebuilds the service exactly.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::state::{DeviceReport, Participant};
use super::survey::SurveyResponse;
use super::ServiceError;
use crate::calibration::{CalibrationModel, PerceptionLabel};
use crate::policy::{BlockState, ConditionSwitch, PolicyConfig, PromptEvent, Transition};
use crate::sensing::EnergyWindow;
use crate::time::Timestamp;
use crate::ParticipantId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StoredEvent {
    /// Always the first record of a log.
    Configured {
        study_seed: u64,
        policy: PolicyConfig,
    },
    ParticipantRegistered {
        participant: Participant,
        block_state: BlockState,
    },
    ParticipantActivity {
        participant_id: ParticipantId,
        active: bool,
        at: Timestamp,
    },
    WindowIngested {
        window: EnergyWindow,
        at: Timestamp,
    },
    DeviceReported {
        report: DeviceReport,
        at: Timestamp,
    },
    PinSet {
        participant_id: ParticipantId,
        salt: String,
        hash: String,
    },
    RecordingStopped {
        participant_id: ParticipantId,
        at: Timestamp,
    },
    PromptSent {
        event: PromptEvent,
    },
    PromptTransitioned {
        participant_id: ParticipantId,
        transition: Transition,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        response: Option<SurveyResponse>,
    },
    LabelRecorded {
        label: PerceptionLabel,
    },
    ConditionSwitched {
        participant_id: ParticipantId,
        switch: ConditionSwitch,
        at: Timestamp,
    },
    ModelsFitted {
        models: Vec<CalibrationModel>,
    },
    SchedulerAdvanced {
        to: Timestamp,
    },
}

impl StoredEvent {
    /// The participant whose state this event changes, if any.
    pub fn participant_id(&self) -> Option<ParticipantId> {
        use StoredEvent::*;
        match self {
            Configured { .. } | ModelsFitted { .. } | SchedulerAdvanced { .. } => None,
            ParticipantRegistered { participant, .. } => Some(participant.id),
            WindowIngested { window, .. } => Some(window.participant_id),
            DeviceReported { report, .. } => Some(report.participant_id),
            PromptSent { event } => Some(event.participant_id),
            LabelRecorded { label } => Some(label.participant_id),
            ParticipantActivity { participant_id, .. }
            | PinSet { participant_id, .. }
            | RecordingStopped { participant_id, .. }
            | PromptTransitioned { participant_id, .. }
            | ConditionSwitched { participant_id, .. } => Some(*participant_id),
        }
    }
}

/// Where log lines go. The in-memory copy is always kept so exports do not
/// have to re-read the file.
#[derive(Debug)]
pub struct EventLog {
    records: Vec<StoredEvent>,
    file: Option<(PathBuf, File)>,
    sync: bool,
}

impl EventLog {
    pub fn memory() -> Self {
        EventLog { records: Vec::new(), file: None, sync: false }
    }

    /// Opens (or creates) a log file and returns the events already in it.
    ///
    /// A final line without a trailing newline is a torn write from a crash;
    /// it is dropped and the file truncated. Any other unparseable line is
    /// corruption and an error.
    pub fn open_file(path: &Path, sync: bool) -> Result<(Self, Vec<StoredEvent>), ServiceError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let (events, valid_len) = read_events(BufReader::new(&mut file), path)?;
        if valid_len < file.metadata()?.len() {
            tracing::warn!(path = %path.display(), valid_len, "dropping torn trailing log line");
            file.set_len(valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        let log = EventLog { records: events.clone(), file: Some((path.to_path_buf(), file)), sync };
        Ok((log, events))
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// Appends one event, flushing it to the OS before returning.
    pub fn append(&mut self, event: &StoredEvent) -> Result<(), ServiceError> {
        if let Some((_, file)) = &mut self.file {
            let mut line = serde_json::to_vec(event).map_err(|e| ServiceError::Storage(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.flush()?;
            if self.sync {
                file.sync_data()?;
            }
        }
        self.records.push(event.clone());
        Ok(())
    }

    pub fn records(&self) -> &[StoredEvent] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_ndjson<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Parses NDJSON log lines, returning the events and the byte length of the
/// valid prefix.
pub fn read_events<R: BufRead>(mut reader: R, origin: &Path) -> Result<(Vec<StoredEvent>, u64), ServiceError> {
    let mut events = Vec::new();
    let mut valid = 0u64;
    let mut line = String::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            break;
        }
        lineno += 1;
        let complete = line.ends_with('\n');
        let text = line.trim();
        if text.is_empty() {
            valid += n as u64;
            continue;
        }
        // the newline is written together with the record, so an
        // unterminated last line was never acknowledged
        if !complete {
            break;
        }
        let ev = serde_json::from_str::<StoredEvent>(text)
            .map_err(|e| ServiceError::Storage(format!("{}:{lineno}: corrupt log record: {e}", origin.display())))?;
        events.push(ev);
        valid += n as u64;
    }
    Ok((events, valid))
}

/// Reads a whole log file without opening it for writing.
pub fn load_events(path: &Path) -> Result<Vec<StoredEvent>, ServiceError> {
    let file = File::open(path)?;
    Ok(read_events(BufReader::new(file), path)?.0)
}
