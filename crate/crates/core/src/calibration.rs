//! Linear calibration from lookback energy to the parent's 1-5 activity
//! rating: ordinary least squares fitting, held-out evaluation and a model
//! registry with global fallback.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::LookbackFeature;
use crate::time::Timestamp;
use crate::ParticipantId;

pub const RATING_MIN: u8 = 1;
pub const RATING_MAX: u8 = 5;
/// Personalized models with fewer training labels fall back to the global one.
pub const DEFAULT_MIN_LABELS: usize = 10;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("cold start: {n} label(s) is not enough to fit, use the global model")]
    ColdStart { n: usize },
    #[error("need at least {need} labels to evaluate, got {got}")]
    InsufficientLabels { need: usize, got: usize },
    #[error("rating {0} outside 1..=5")]
    InvalidRating(u8),
    #[error("label feature is not usable ({windows_present} windows present)")]
    UnusableFeature { windows_present: u32 },
    #[error("label as_of {label} does not match feature as_of {feature}")]
    MismatchedFeature { label: Timestamp, feature: Timestamp },
    #[error("non-finite input")]
    NonFinite,
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("model registry is empty")]
    EmptyRegistry,
    #[error("invalid scope {0:?}")]
    InvalidScope(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {source}")]
    AtLine { line: u64, source: Box<CalibrationError> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scope {
    Global,
    Participant(ParticipantId),
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Global => f.write_str("global"),
            Scope::Participant(id) => write!(f, "participant:{}", id.get()),
        }
    }
}

impl FromStr for Scope {
    type Err = CalibrationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "global" {
            return Ok(Scope::Global);
        }
        s.strip_prefix("participant:")
            .and_then(|id| id.parse().ok())
            .map(|id| Scope::Participant(ParticipantId::new(id)))
            .ok_or_else(|| CalibrationError::InvalidScope(s.to_string()))
    }
}

impl Serialize for Scope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Scope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A parent's rating paired with the lookback feature at the time of answering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerceptionLabel {
    pub participant_id: ParticipantId,
    pub as_of: Timestamp,
    pub rating: u8,
    pub feature: LookbackFeature,
}

impl PerceptionLabel {
    pub fn new(
        participant_id: ParticipantId,
        rating: u8,
        feature: LookbackFeature,
        min_coverage: u32,
    ) -> Result<Self, CalibrationError> {
        let label = PerceptionLabel { participant_id, as_of: feature.as_of, rating, feature };
        label.validate(min_coverage)?;
        Ok(label)
    }

    pub fn validate(&self, min_coverage: u32) -> Result<(), CalibrationError> {
        if !(RATING_MIN..=RATING_MAX).contains(&self.rating) {
            return Err(CalibrationError::InvalidRating(self.rating));
        }
        if self.feature.as_of != self.as_of {
            return Err(CalibrationError::MismatchedFeature { label: self.as_of, feature: self.feature.as_of });
        }
        if !self.feature.is_usable(min_coverage) {
            return Err(CalibrationError::UnusableFeature { windows_present: self.feature.windows_present });
        }
        if !self.feature.mean_energy.is_finite() {
            return Err(CalibrationError::NonFinite);
        }
        Ok(())
    }

    fn point(&self) -> (f64, f64) {
        (self.feature.mean_energy, self.rating as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationModel {
    pub scope: Scope,
    /// Rating per g of lookback energy.
    pub slope: f64,
    pub intercept: f64,
    pub n_train: usize,
    pub fitted_at: Timestamp,
}

impl CalibrationModel {
    pub fn predict_raw(&self, mean_energy: f64) -> f64 {
        self.slope * mean_energy + self.intercept
    }
}

/// Least-squares line through `(x, y)` points, returned as `(slope, intercept)`.
///
/// When every `x` is identical the slope is 0 and the intercept is the mean
/// of `y`.
pub fn fit_points(points: &[(f64, f64)]) -> Result<(f64, f64), CalibrationError> {
    if points.len() < 2 {
        return Err(CalibrationError::ColdStart { n: points.len() });
    }
    if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
        return Err(CalibrationError::NonFinite);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let first_x = points[0].0;
    if points.iter().all(|p| p.0 == first_x) {
        return Ok((0.0, mean_y));
    }
    let (sxx, sxy) = points.iter().fold((0.0, 0.0), |(sxx, sxy), &(x, y)| {
        let dx = x - mean_x;
        (sxx + dx * dx, sxy + dx * (y - mean_y))
    });
    if sxx == 0.0 {
        return Ok((0.0, mean_y));
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

pub fn fit_ols(
    labels: &[PerceptionLabel],
    scope: Scope,
    fitted_at: Timestamp,
) -> Result<CalibrationModel, CalibrationError> {
    let points: Vec<_> = labels.iter().map(PerceptionLabel::point).collect();
    let (slope, intercept) = fit_points(&points)?;
    Ok(CalibrationModel { scope, slope, intercept, n_train: labels.len(), fitted_at })
}

/// Clamped rating prediction, or `None` when the feature has too little coverage.
pub fn predict(model: &CalibrationModel, feature: &LookbackFeature, min_coverage: u32) -> Option<f64> {
    feature
        .is_usable(min_coverage)
        .then(|| model.predict_raw(feature.mean_energy).clamp(RATING_MIN as f64, RATING_MAX as f64))
}

/// Coefficient of determination against the mean of `actual`. `None` when
/// `actual` has zero variance or is empty.
pub fn r_squared(actual: &[f64], predicted: &[f64]) -> Option<f64> {
    if actual.is_empty() || actual.len() != predicted.len() {
        return None;
    }
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_tot: f64 = actual.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot <= f64::EPSILON * actual.len() as f64 {
        return None;
    }
    let ss_res: f64 = actual.iter().zip(predicted).map(|(y, p)| (y - p).powi(2)).sum();
    Some(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scope: Scope,
    /// `None` when the test fold has zero variance.
    pub r_squared: Option<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

/// Seeded shuffle of `0..n` cut into (train, test) index sets.
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), CalibrationError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CalibrationError::InvalidRatio(train_fraction));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1.min(n), n.saturating_sub(1));
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

const MIN_EVAL_LABELS: usize = 5;

/// Fits on a seeded train fraction and scores R² on the remainder.
///
/// The scope is the single participant when all labels share one,
/// otherwise global. R² uses the unclamped linear output.
pub fn evaluate_split(
    labels: &[PerceptionLabel],
    train_fraction: f64,
    seed: u64,
) -> Result<EvalReport, CalibrationError> {
    if labels.len() < MIN_EVAL_LABELS {
        return Err(CalibrationError::InsufficientLabels { need: MIN_EVAL_LABELS, got: labels.len() });
    }
    let scope = match labels[0].participant_id {
        id if labels.iter().all(|l| l.participant_id == id) => Scope::Participant(id),
        _ => Scope::Global,
    };
    let (train, test) = split_indices(labels.len(), train_fraction, seed)?;
    let train_labels: Vec<_> = train.iter().map(|&i| labels[i].clone()).collect();
    let model = fit_ols(&train_labels, scope, Timestamp::default())?;
    let actual: Vec<f64> = test.iter().map(|&i| labels[i].rating as f64).collect();
    let predicted: Vec<f64> = test.iter().map(|&i| model.predict_raw(labels[i].feature.mean_energy)).collect();
    Ok(EvalReport {
        scope,
        r_squared: r_squared(&actual, &predicted),
        n_train: train.len(),
        n_test: test.len(),
        split_seed: seed,
    })
}

/// Global vs personalized evaluation over one shared train/test split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub global: EvalReport,
    pub per_participant: Vec<EvalReport>,
    /// Mean of the defined per-participant R² values.
    pub mean_personalized_r2: Option<f64>,
    /// R² over the pooled test fold, each row predicted by its own family's model.
    pub pooled_personalized_r2: Option<f64>,
}

pub fn evaluate_personalization(
    labels: &[PerceptionLabel],
    train_fraction: f64,
    seed: u64,
) -> Result<PersonalizationReport, CalibrationError> {
    if labels.len() < MIN_EVAL_LABELS {
        return Err(CalibrationError::InsufficientLabels { need: MIN_EVAL_LABELS, got: labels.len() });
    }
    let (train, test) = split_indices(labels.len(), train_fraction, seed)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i].clone()).collect::<Vec<_>>();
    let train_labels = pick(&train);
    let test_labels = pick(&test);

    let global_model = fit_ols(&train_labels, Scope::Global, Timestamp::default())?;
    let actual: Vec<f64> = test_labels.iter().map(|l| l.rating as f64).collect();
    let global_pred: Vec<f64> = test_labels.iter().map(|l| global_model.predict_raw(l.feature.mean_energy)).collect();
    let global = EvalReport {
        scope: Scope::Global,
        r_squared: r_squared(&actual, &global_pred),
        n_train: train_labels.len(),
        n_test: test_labels.len(),
        split_seed: seed,
    };

    let mut by_participant: BTreeMap<ParticipantId, (Vec<PerceptionLabel>, Vec<PerceptionLabel>)> = BTreeMap::new();
    for l in &train_labels {
        by_participant.entry(l.participant_id).or_default().0.push(l.clone());
    }
    for l in &test_labels {
        by_participant.entry(l.participant_id).or_default().1.push(l.clone());
    }
    let mut models = BTreeMap::new();
    let mut per_participant = Vec::new();
    for (id, (tr, te)) in &by_participant {
        let scope = Scope::Participant(*id);
        let Ok(model) = fit_ols(tr, scope, Timestamp::default()) else {
            continue;
        };
        let a: Vec<f64> = te.iter().map(|l| l.rating as f64).collect();
        let p: Vec<f64> = te.iter().map(|l| model.predict_raw(l.feature.mean_energy)).collect();
        per_participant.push(EvalReport {
            scope,
            r_squared: r_squared(&a, &p),
            n_train: tr.len(),
            n_test: te.len(),
            split_seed: seed,
        });
        models.insert(*id, model);
    }
    let pooled_pred: Vec<f64> = test_labels
        .iter()
        .map(|l| models.get(&l.participant_id).unwrap_or(&global_model).predict_raw(l.feature.mean_energy))
        .collect();
    let defined: Vec<f64> = per_participant.iter().filter_map(|r| r.r_squared).collect();
    let mean_personalized_r2 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(PersonalizationReport {
        global,
        per_participant,
        mean_personalized_r2,
        pooled_personalized_r2: r_squared(&actual, &pooled_pred),
    })
}

/// Immutable view of the fitted models.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegistrySnapshot {
    pub global: Option<CalibrationModel>,
    pub participants: BTreeMap<ParticipantId, CalibrationModel>,
}

impl RegistrySnapshot {
    pub fn is_empty(&self) -> bool {
        self.global.is_none() && self.participants.is_empty()
    }

    pub fn insert(&mut self, model: CalibrationModel) {
        match model.scope {
            Scope::Global => self.global = Some(model),
            Scope::Participant(id) => {
                self.participants.insert(id, model);
            }
        }
    }

    pub fn models(&self) -> impl Iterator<Item = &CalibrationModel> {
        self.global.iter().chain(self.participants.values())
    }
}

/// Picks the participant's own model when it was trained on at least
/// `min_labels` labels, otherwise the global model.
pub fn select_model(
    participant_id: ParticipantId,
    registry: &RegistrySnapshot,
    min_labels: usize,
) -> Result<&CalibrationModel, CalibrationError> {
    let global = registry.global.as_ref().ok_or(CalibrationError::EmptyRegistry)?;
    Ok(registry.participants.get(&participant_id).filter(|m| m.n_train >= min_labels).unwrap_or(global))
}

/// Single-writer/multi-reader model store. Writers publish a whole new
/// snapshot, so readers never see a half-updated model set.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    current: RwLock<Arc<RegistrySnapshot>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryDocument {
    models: Vec<CalibrationModel>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn snapshot(&self) -> Arc<RegistrySnapshot> {
        self.current.read().clone()
    }

    pub fn publish(&self, models: impl IntoIterator<Item = CalibrationModel>) {
        let mut next = (*self.snapshot()).clone();
        for m in models {
            next.insert(m);
        }
        *self.current.write() = Arc::new(next);
    }

    pub fn to_json(&self) -> String {
        let doc = RegistryDocument { models: self.snapshot().models().cloned().collect() };
        serde_json::to_string_pretty(&doc).expect("registry serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CalibrationError> {
        let doc: RegistryDocument = serde_json::from_str(text)?;
        let reg = ModelRegistry::new();
        reg.publish(doc.models);
        Ok(reg)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelRow {
    participant_id: u32,
    as_of_ms: i64,
    rating: u8,
    mean_energy: f64,
    windows_present: u32,
}

/// Labels file: `participant_id,as_of_ms,rating,mean_energy,windows_present`.
pub fn write_labels_csv<W: io::Write>(writer: W, labels: &[PerceptionLabel]) -> Result<(), CalibrationError> {
    let mut wtr = csv::Writer::from_writer(writer);
    for l in labels {
        wtr.serialize(LabelRow {
            participant_id: l.participant_id.get(),
            as_of_ms: l.as_of.as_millis(),
            rating: l.rating,
            mean_energy: l.feature.mean_energy,
            windows_present: l.feature.windows_present,
        })?;
    }
    wtr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_labels_csv<R: io::Read>(reader: R, min_coverage: u32) -> Result<Vec<PerceptionLabel>, CalibrationError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let mut out = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let parse = || -> Result<PerceptionLabel, CalibrationError> {
            let r: LabelRow = record.deserialize(Some(&headers))?;
            let as_of = Timestamp::from_millis(r.as_of_ms);
            let feature = LookbackFeature { as_of, mean_energy: r.mean_energy, windows_present: r.windows_present };
            PerceptionLabel::new(ParticipantId::new(r.participant_id), r.rating, feature, min_coverage)
        };
        out.push(parse().map_err(|e| CalibrationError::AtLine { line, source: Box::new(e) })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn label(pid: u32, x: f64, rating: u8) -> PerceptionLabel {
        let as_of = Timestamp::from_millis(0);
        PerceptionLabel {
            participant_id: ParticipantId::new(pid),
            as_of,
            rating,
            feature: LookbackFeature { as_of, mean_energy: x, windows_present: 12 },
        }
    }

    fn model(slope: f64, intercept: f64) -> CalibrationModel {
        CalibrationModel { scope: Scope::Global, slope, intercept, n_train: 10, fitted_at: Timestamp::default() }
    }

    fn feat(x: f64) -> LookbackFeature {
        LookbackFeature { as_of: Timestamp::default(), mean_energy: x, windows_present: 12 }
    }

    #[test]
    fn exact_interpolation() {
        let m = fit_ols(&[label(1, 1.0, 1), label(1, 2.0, 2)], Scope::Global, Timestamp::default()).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-12);
        assert!(m.intercept.abs() < 1e-12);
        assert_eq!(m.n_train, 2);
    }

    #[test]
    fn degenerate_x_gives_mean_intercept() {
        let m = fit_ols(&[label(1, 0.4, 2), label(1, 0.4, 4)], Scope::Global, Timestamp::default()).unwrap();
        assert_eq!(m.slope, 0.0);
        assert_eq!(m.intercept, 3.0);
        let (s, b) = fit_points(&[(0.1, 1.0), (0.1, 2.0), (0.1, 2.0)]).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(b, 5.0 / 3.0);
    }

    #[test]
    fn cold_start_below_two_labels() {
        assert!(matches!(
            fit_ols(&[label(1, 0.1, 1)], Scope::Global, Timestamp::default()),
            Err(CalibrationError::ColdStart { n: 1 })
        ));
        assert!(matches!(fit_points(&[]), Err(CalibrationError::ColdStart { n: 0 })));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&model(0.0, 3.0), &feat(7.0), 6), Some(3.0));
        assert_eq!(predict(&model(10.0, 0.0), &feat(2.0), 6), Some(5.0));
        let p = predict(&model(1.0, 0.5), &feat(1.8), 6).unwrap();
        assert!((p - 2.3).abs() < 1e-12);
        let thin = LookbackFeature { windows_present: 5, ..feat(0.1) };
        assert_eq!(predict(&model(1.0, 0.5), &thin, 6), None);
    }

    #[test]
    fn noiseless_split_has_unit_r2() {
        let labels: Vec<_> = (0..100)
            .map(|i| {
                let r = (i % 5) as u8 + 1;
                label(1, (r as f64 - 1.0) / 2.0, r)
            })
            .collect();
        for seed in 0..50 {
            let rep = evaluate_split(&labels, 0.8, seed).unwrap();
            assert!((rep.r_squared.unwrap() - 1.0).abs() < 1e-9);
            assert_eq!(rep.n_train + rep.n_test, 100);
            assert_eq!(rep.n_train, 80);
        }
    }

    #[test]
    fn constant_test_fold_is_undefined() {
        let labels: Vec<_> = (0..10).map(|i| label(1, i as f64 * 0.1, 3)).collect();
        let rep = evaluate_split(&labels, 0.8, 1).unwrap();
        assert_eq!(rep.r_squared, None);
        assert!(serde_json::to_string(&rep).unwrap().contains("\"r_squared\":null"));
    }

    #[test]
    fn evaluate_requires_five_labels() {
        let labels: Vec<_> = (0..4).map(|i| label(1, i as f64, 2)).collect();
        assert!(matches!(evaluate_split(&labels, 0.8, 0), Err(CalibrationError::InsufficientLabels { .. })));
        assert!(matches!(evaluate_split(&vec![label(1, 0.0, 1); 6], 1.0, 0), Err(CalibrationError::InvalidRatio(_))));
    }

    #[test]
    fn split_is_bit_stable() {
        let a = split_indices(37, 0.8, 99).unwrap();
        let b = split_indices(37, 0.8, 99).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, split_indices(37, 0.8, 100).unwrap());
    }

    #[test]
    fn select_model_threshold() {
        let global = model(1.0, 1.0);
        let mut snap = RegistrySnapshot { global: Some(global.clone()), ..Default::default() };
        let pid = ParticipantId::new(4);
        assert_eq!(select_model(pid, &snap, 10).unwrap(), &global);
        let own = CalibrationModel { scope: Scope::Participant(pid), n_train: 20, ..model(2.0, 0.0) };
        snap.insert(own.clone());
        assert_eq!(select_model(pid, &snap, 10).unwrap(), &own);
        snap.insert(CalibrationModel { n_train: 3, ..own });
        assert_eq!(select_model(pid, &snap, 10).unwrap(), &global);
        assert!(matches!(select_model(pid, &RegistrySnapshot::default(), 10), Err(CalibrationError::EmptyRegistry)));
    }

    #[test]
    fn registry_json_round_trip() {
        let reg = ModelRegistry::new();
        reg.publish([
            model(1.5, 0.25),
            CalibrationModel { scope: Scope::Participant(ParticipantId::new(7)), ..model(-2.0, 4.0) },
        ]);
        let text = reg.to_json();
        assert!(text.contains("\"scope\": \"participant:7\""));
        assert!(text.contains("\"fitted_at\""));
        let back = ModelRegistry::from_json(&text).unwrap();
        assert_eq!(*back.snapshot(), *reg.snapshot());
    }

    #[test]
    fn registry_readers_keep_old_snapshot() {
        let reg = ModelRegistry::new();
        reg.publish([model(1.0, 0.0)]);
        let before = reg.snapshot();
        reg.publish([model(2.0, 0.0)]);
        assert_eq!(before.global.as_ref().unwrap().slope, 1.0);
        assert_eq!(reg.snapshot().global.as_ref().unwrap().slope, 2.0);
    }

    #[test]
    fn label_validation() {
        let f = feat(0.2);
        assert!(PerceptionLabel::new(ParticipantId::new(1), 0, f, 6).is_err());
        assert!(PerceptionLabel::new(ParticipantId::new(1), 6, f, 6).is_err());
        let thin = LookbackFeature { windows_present: 2, ..f };
        assert!(matches!(
            PerceptionLabel::new(ParticipantId::new(1), 3, thin, 6),
            Err(CalibrationError::UnusableFeature { .. })
        ));
    }

    #[test]
    fn labels_csv_round_trip() {
        let labels = vec![label(1, 0.125, 2), label(2, 0.5, 5)];
        let mut buf = Vec::new();
        write_labels_csv(&mut buf, &labels).unwrap();
        assert!(buf.starts_with(b"participant_id,as_of_ms,rating,mean_energy,windows_present\n"));
        assert_eq!(read_labels_csv(&buf[..], 6).unwrap(), labels);
    }

    #[test]
    fn personalization_beats_global_on_heterogeneous_families() {
        // two families with very different slopes around the same energies
        let mut labels = Vec::new();
        for i in 0..60 {
            let x = 0.05 + 0.005 * (i % 40) as f64;
            let a = (1.0 + 20.0 * (x - 0.05)).round().clamp(1.0, 5.0) as u8;
            let b = (1.0 + 5.0 * (x - 0.05)).round().clamp(1.0, 5.0) as u8;
            labels.push(label(1, x, a));
            labels.push(label(2, x, b));
        }
        let rep = evaluate_personalization(&labels, 0.8, 3).unwrap();
        assert!(rep.mean_personalized_r2.unwrap() > rep.global.r_squared.unwrap());
        assert!(rep.pooled_personalized_r2.unwrap() > rep.global.r_squared.unwrap());
        assert_eq!(rep.per_participant.len(), 2);
    }

    proptest! {
        #[test]
        fn rating_shift_moves_intercept_only(
            pts in prop::collection::vec((0.0..2.0f64, 1.0..5.0f64), 3..40),
            c in -10.0..10.0f64,
        ) {
            prop_assume!(pts.iter().any(|p| p.0 != pts[0].0));
            let (s0, b0) = fit_points(&pts).unwrap();
            let shifted: Vec<_> = pts.iter().map(|&(x, y)| (x, y + c)).collect();
            let (s1, b1) = fit_points(&shifted).unwrap();
            prop_assert!((s1 - s0).abs() < 1e-9 * (1.0 + s0.abs()));
            prop_assert!((b1 - (b0 + c)).abs() < 1e-9 * (1.0 + b0.abs() + c.abs()));
        }

        #[test]
        fn prediction_monotone_and_bounded(slope in 0.001..50.0f64, intercept in -20.0..20.0f64, x in 0.0..3.0f64, dx in 0.0..1.0f64) {
            let m = model(slope, intercept);
            let lo = predict(&m, &feat(x), 6).unwrap();
            let hi = predict(&m, &feat(x + dx), 6).unwrap();
            prop_assert!(lo <= hi);
            prop_assert!((1.0..=5.0).contains(&lo) && (1.0..=5.0).contains(&hi));
            prop_assert!(m.predict_raw(x) <= m.predict_raw(x + dx));
        }

        #[test]
        fn evaluation_is_deterministic(seed in any::<u64>()) {
            let labels: Vec<_> = (0..30).map(|i| label(1 + i % 3, (i * 7 % 11) as f64 * 0.05, (i % 5) as u8 + 1)).collect();
            let a = evaluate_personalization(&labels, 0.8, seed).unwrap();
            let b = evaluate_personalization(&labels, 0.8, seed).unwrap();
            prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        }
    }
}
