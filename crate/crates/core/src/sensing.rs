//! Accelerometer samples to 5-minute energy windows, and the one-hour
//! lookback feature the calibration models consume.
//!
//! Raw motion samples never leave this module: everything downstream sees
//! [`EnergyWindow`] values only.

use std::io;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Timestamp, HOUR_MS, MINUTE_MS};
use crate::ParticipantId;

pub const WINDOW_MS: i64 = 5 * MINUTE_MS;
pub const LOOKBACK_MS: i64 = HOUR_MS;
pub const MAX_LOOKBACK_WINDOWS: u32 = (LOOKBACK_MS / WINDOW_MS) as u32;
/// Lookbacks with fewer present windows than this are not used for prediction.
pub const DEFAULT_MIN_COVERAGE: u32 = 6;

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("non-finite sample at t={t}")]
    NonFinite { t: Timestamp },
    #[error("sample at t={t} outside window starting {window_start}")]
    OutOfWindow { t: Timestamp, window_start: Timestamp },
    #[error("samples not strictly increasing at t={t}")]
    Unordered { t: Timestamp },
    #[error("window start {0} is not aligned to the 5-minute grid")]
    Misaligned(Timestamp),
    #[error("invalid energy window: {0}")]
    InvalidWindow(String),
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for SensingError {
    fn from(e: csv::Error) -> Self {
        SensingError::Csv(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccelSample {
    pub t: Timestamp,
    pub ax: f64,
    pub ay: f64,
    pub az: f64,
}

impl AccelSample {
    pub fn new(t_ms: i64, ax: f64, ay: f64, az: f64) -> Self {
        AccelSample { t: Timestamp::from_millis(t_ms), ax, ay, az }
    }

    fn is_finite(&self) -> bool {
        self.ax.is_finite() && self.ay.is_finite() && self.az.is_finite()
    }

    /// Squared magnitude averaged over the three axes.
    fn mean_square(&self) -> f64 {
        (self.ax * self.ax + self.ay * self.ay + self.az * self.az) / 3.0
    }
}

/// One 5-minute motion-energy value. `energy` is `None` for an absent
/// window (no samples), never zero-filled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyWindow {
    pub participant_id: ParticipantId,
    pub window_start: Timestamp,
    pub energy: Option<f64>,
    pub sample_count: u32,
}

impl EnergyWindow {
    pub fn present(participant_id: ParticipantId, window_start: Timestamp, energy: f64, sample_count: u32) -> Self {
        EnergyWindow { participant_id, window_start, energy: Some(energy), sample_count }
    }

    pub fn absent(participant_id: ParticipantId, window_start: Timestamp) -> Self {
        EnergyWindow { participant_id, window_start, energy: None, sample_count: 0 }
    }

    pub fn is_absent(&self) -> bool {
        self.energy.is_none()
    }

    pub fn validate(&self) -> Result<(), SensingError> {
        if !self.window_start.is_aligned(WINDOW_MS) {
            return Err(SensingError::Misaligned(self.window_start));
        }
        match self.energy {
            Some(e) if !e.is_finite() || e < 0.0 => {
                Err(SensingError::InvalidWindow(format!("energy {e} must be finite and non-negative")))
            }
            Some(_) if self.sample_count == 0 => {
                Err(SensingError::InvalidWindow("sample_count 0 must be marked absent".into()))
            }
            None if self.sample_count != 0 => {
                Err(SensingError::InvalidWindow("absent window with nonzero sample_count".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Mean energy over the hour before `as_of`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LookbackFeature {
    pub as_of: Timestamp,
    pub mean_energy: f64,
    pub windows_present: u32,
}

impl LookbackFeature {
    pub fn is_usable(&self, min_coverage: u32) -> bool {
        self.windows_present > 0 && self.windows_present >= min_coverage
    }
}

/// Which energy definition to compute. Only `Rms` feeds the models; the
/// integrated form exists for comparison runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureVariant {
    #[default]
    Rms,
    /// Time integral (seconds) of the per-axis mean squared acceleration.
    Integrated,
}

/// RMS energy of the samples in `[window_start, window_start + 5 min)`.
pub fn compute_energy(
    participant_id: ParticipantId,
    samples: &[AccelSample],
    window_start: Timestamp,
) -> Result<EnergyWindow, SensingError> {
    compute_energy_with(participant_id, samples, window_start, FeatureVariant::Rms)
}

pub fn compute_energy_with(
    participant_id: ParticipantId,
    samples: &[AccelSample],
    window_start: Timestamp,
    variant: FeatureVariant,
) -> Result<EnergyWindow, SensingError> {
    if !window_start.is_aligned(WINDOW_MS) {
        return Err(SensingError::Misaligned(window_start));
    }
    let window_end = window_start.plus_millis(WINDOW_MS);
    let mut prev: Option<Timestamp> = None;
    for s in samples {
        if !s.is_finite() {
            return Err(SensingError::NonFinite { t: s.t });
        }
        if s.t < window_start || s.t >= window_end {
            return Err(SensingError::OutOfWindow { t: s.t, window_start });
        }
        if prev.is_some_and(|p| s.t <= p) {
            return Err(SensingError::Unordered { t: s.t });
        }
        prev = Some(s.t);
    }
    if samples.is_empty() {
        return Ok(EnergyWindow::absent(participant_id, window_start));
    }

    let energy = match variant {
        FeatureVariant::Rms => {
            let mean = samples.iter().map(AccelSample::mean_square).sum::<f64>() / samples.len() as f64;
            mean.sqrt()
        }
        FeatureVariant::Integrated => {
            // rectangle rule: each sample holds until the next one (or window end)
            samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let next = samples.get(i + 1).map_or(window_end, |n| n.t);
                    s.mean_square() * next.millis_since(s.t) as f64 / 1_000.0
                })
                .sum()
        }
    };
    Ok(EnergyWindow::present(participant_id, window_start, energy, samples.len() as u32))
}

/// Groups an ordered sample stream into grid windows and computes each one.
/// Grid slots between the first and last sample that hold no samples are
/// returned as absent windows.
pub fn windows_from_stream(
    participant_id: ParticipantId,
    samples: &[AccelSample],
    variant: FeatureVariant,
) -> Result<Vec<EnergyWindow>, SensingError> {
    let (Some(first), Some(last)) = (samples.first(), samples.last()) else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    let mut start = first.t.floor_to(WINDOW_MS);
    let mut rest = samples;
    while start <= last.t {
        let end = start.plus_millis(WINDOW_MS);
        let n = rest.iter().take_while(|s| s.t < end).count();
        out.push(compute_energy_with(participant_id, &rest[..n], start, variant)?);
        rest = &rest[n..];
        start = end;
    }
    Ok(out)
}

/// Mean of the present windows whose start lies in `[as_of - 1 h, as_of)`.
pub fn lookback_mean<'a, I>(windows: I, as_of: Timestamp) -> LookbackFeature
where
    I: IntoIterator<Item = &'a EnergyWindow>,
{
    let from = as_of.minus_millis(LOOKBACK_MS);
    let (sum, n) = windows
        .into_iter()
        .filter(|w| w.window_start >= from && w.window_start < as_of)
        .filter_map(|w| w.energy)
        .fold((0.0, 0u32), |(sum, n), e| (sum + e, n + 1));
    LookbackFeature { as_of, mean_energy: if n == 0 { 0.0 } else { sum / n as f64 }, windows_present: n }
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRow {
    t_ms: i64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowRow {
    participant_id: u32,
    window_start_ms: i64,
    energy: Option<f64>,
    sample_count: u32,
}

/// Reads a `t_ms,ax,ay,az` trace.
pub fn read_samples_csv<R: io::Read>(reader: R) -> Result<Vec<AccelSample>, SensingError> {
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<SampleRow>()
        .map(|row| row.map(|r| AccelSample::new(r.t_ms, r.ax, r.ay, r.az)).map_err(SensingError::from))
        .collect()
}

pub fn write_samples_csv<W: io::Write>(writer: W, samples: &[AccelSample]) -> Result<(), SensingError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for s in samples {
        wtr.serialize(SampleRow { t_ms: s.t.as_millis(), ax: s.ax, ay: s.ay, az: s.az })?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Writes the `participant_id,window_start_ms,energy,sample_count` export.
/// Absent windows have an empty energy field.
pub fn write_windows_csv<W: io::Write>(writer: W, windows: &[EnergyWindow]) -> Result<(), SensingError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for w in windows {
        wtr.serialize(WindowRow {
            participant_id: w.participant_id.get(),
            window_start_ms: w.window_start.as_millis(),
            energy: w.energy,
            sample_count: w.sample_count,
        })?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn windows_to_csv_bytes(windows: &[EnergyWindow]) -> Vec<u8> {
    let mut buf = Vec::new();
    // writing to a Vec cannot fail
    write_windows_csv(&mut buf, windows).expect("in-memory csv write");
    buf
}

pub fn read_windows_csv<R: io::Read>(reader: R) -> Result<Vec<EnergyWindow>, SensingError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<WindowRow>() {
        let r = row?;
        let w = EnergyWindow {
            participant_id: ParticipantId::new(r.participant_id),
            window_start: Timestamp::from_millis(r.window_start_ms),
            energy: r.energy,
            sample_count: r.sample_count,
        };
        w.validate()?;
        out.push(w);
    }
    Ok(out)
}
