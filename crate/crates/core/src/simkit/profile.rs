use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{substream, SimError};

/// Per-5-minute transition probabilities of the calm/active chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Markov {
    pub p_calm_to_active: f64,
    pub p_active_to_calm: f64,
}

impl Markov {
    /// Long-run fraction of steps spent calm.
    pub fn stationary_calm(&self) -> f64 {
        let total = self.p_calm_to_active + self.p_active_to_calm;
        if total == 0.0 {
            0.5
        } else {
            self.p_active_to_calm / total
        }
    }
}

/// Lognormal energy per state. `mu_*` is the median energy in g and
/// `sigma_*` the standard deviation of its logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyLaw {
    pub mu_calm: f64,
    pub sigma_calm: f64,
    pub mu_active: f64,
    pub sigma_active: f64,
}

/// `rating = clamp(round(alpha + beta * lookback_energy + noise), 1, 5)`
/// with `noise ~ N(0, noise_sd)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perception {
    pub alpha: f64,
    pub beta: f64,
    pub noise_sd: f64,
}

impl Perception {
    pub fn rating(&self, lookback_energy: f64, noise: f64) -> u8 {
        (self.alpha + self.beta * lookback_energy + noise).round().clamp(1.0, 5.0) as u8
    }
}

/// Local hours during which the child wears the watch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WearHours {
    pub start_hour: u32,
    pub end_hour: u32,
}

impl Default for WearHours {
    fn default() -> Self {
        WearHours { start_hour: 7, end_hour: 21 }
    }
}

/// Daily chance of one offline stretch, uniformly placed between 08:00 and
/// 20:00 local, lasting up to `outage_minutes_max`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Connectivity {
    pub daily_outage_prob: f64,
    pub outage_minutes_max: u32,
    /// Never online again after this study day (1-based), if set.
    #[serde(default)]
    pub permanent_outage_from_day: Option<u32>,
}

fn default_delay() -> u32 {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyProfile {
    pub participant_id: u32,
    #[serde(default)]
    pub utc_offset_minutes: i32,
    pub markov: Markov,
    pub energy_law: EnergyLaw,
    pub perception: Perception,
    /// Probability of answering an intraday prompt.
    pub responsiveness: f64,
    /// Probability of answering end-of-day and end-of-week surveys;
    /// defaults to `responsiveness`.
    #[serde(default)]
    pub daily_responsiveness: Option<f64>,
    /// Subtracted from both response probabilities each study week after the first.
    #[serde(default)]
    pub responsiveness_decay_per_week: f64,
    /// Answer delay is uniform over `[0, answer_delay_max_minutes)` minutes.
    #[serde(default = "default_delay")]
    pub answer_delay_max_minutes: u32,
    #[serde(default)]
    pub wear: WearHours,
    #[serde(default)]
    pub connectivity: Connectivity,
    /// Chance a worn window is recorded with no samples.
    #[serde(default)]
    pub missing_window_prob: f64,
}

fn check(ok: bool, id: u32, what: &str) -> Result<(), SimError> {
    if ok {
        Ok(())
    } else {
        Err(SimError::Profile(format!("profile {id}: {what}")))
    }
}

fn prob(p: f64) -> bool {
    (0.0..=1.0).contains(&p)
}

impl FamilyProfile {
    pub fn validate(&self) -> Result<(), SimError> {
        let id = self.participant_id;
        let m = &self.markov;
        let e = &self.energy_law;
        check(prob(m.p_calm_to_active) && prob(m.p_active_to_calm), id, "markov probabilities must lie in [0, 1]")?;
        check(e.mu_calm > 0.0 && e.mu_active > e.mu_calm, id, "need 0 < mu_calm < mu_active")?;
        check(e.sigma_calm > 0.0 && e.sigma_active > 0.0, id, "sigmas must be positive")?;
        check(
            [e.mu_calm, e.mu_active, e.sigma_calm, e.sigma_active].iter().all(|v| v.is_finite()),
            id,
            "energy law must be finite",
        )?;
        let p = &self.perception;
        check(
            p.alpha.is_finite() && p.beta.is_finite() && p.noise_sd.is_finite() && p.noise_sd >= 0.0,
            id,
            "perception must be finite with noise_sd >= 0",
        )?;
        check(prob(self.responsiveness), id, "responsiveness must lie in [0, 1]")?;
        check(self.daily_responsiveness.is_none_or(prob), id, "daily_responsiveness must lie in [0, 1]")?;
        check(prob(self.responsiveness_decay_per_week), id, "responsiveness_decay_per_week must lie in [0, 1]")?;
        check(self.answer_delay_max_minutes >= 1, id, "answer_delay_max_minutes must be at least 1")?;
        check(
            self.wear.start_hour < self.wear.end_hour && self.wear.end_hour <= 24,
            id,
            "wear hours must satisfy start < end <= 24",
        )?;
        check(prob(self.connectivity.daily_outage_prob), id, "daily_outage_prob must lie in [0, 1]")?;
        check(prob(self.missing_window_prob), id, "missing_window_prob must lie in [0, 1]")?;
        check(
            self.utc_offset_minutes.abs() <= 18 * 60 && self.utc_offset_minutes % 5 == 0,
            id,
            "utc offset must be a multiple of 5 minutes within +-18 h",
        )?;
        Ok(())
    }

    /// Response probability for a survey sent in study week `week`.
    pub fn response_probability(&self, intraday: bool, week: u32) -> f64 {
        let base =
            if intraday { self.responsiveness } else { self.daily_responsiveness.unwrap_or(self.responsiveness) };
        (base - self.responsiveness_decay_per_week * week.saturating_sub(1) as f64).clamp(0.0, 1.0)
    }
}

/// Parses a JSON list of profiles. Errors carry the line and column.
pub fn parse_profiles(text: &str) -> Result<Vec<FamilyProfile>, SimError> {
    let profiles: Vec<FamilyProfile> = serde_json::from_str(text)
        .map_err(|e| SimError::Profile(format!("line {}, column {}: {e}", e.line(), e.column())))?;
    if profiles.is_empty() {
        return Err(SimError::Profile("profile list is empty".into()));
    }
    let mut ids = HashSet::new();
    for p in &profiles {
        p.validate()?;
        if !ids.insert(p.participant_id) {
            return Err(SimError::Profile(format!("duplicate participant_id {}", p.participant_id)));
        }
    }
    Ok(profiles)
}

/// A heterogeneous synthetic cohort: families differ in activity dynamics,
/// energy levels, how they map energy to ratings and how often they answer.
pub fn synthetic_cohort(n: u32, noise_sd: f64, seed: u64) -> Vec<FamilyProfile> {
    let mut rng = substream(seed, "cohort", 0);
    (1..=n)
        .map(|id| {
            let mu_calm = rng.random_range(0.02..0.09);
            let mu_active = mu_calm * rng.random_range(4.0..8.0);
            // ratings a parent gives a fully calm and a fully active hour
            let calm_rating = rng.random_range(1.0..2.0);
            let active_rating = rng.random_range(3.5..5.0);
            let beta = (active_rating - calm_rating) / (mu_active - mu_calm);
            let alpha = calm_rating - beta * mu_calm;
            FamilyProfile {
                participant_id: id,
                utc_offset_minutes: [0, -300, 60, 330, -480, 120][(id as usize - 1) % 6],
                markov: Markov {
                    p_calm_to_active: rng.random_range(0.03..0.07),
                    p_active_to_calm: rng.random_range(0.06..0.10),
                },
                energy_law: EnergyLaw {
                    mu_calm,
                    sigma_calm: rng.random_range(0.25..0.4),
                    mu_active,
                    sigma_active: rng.random_range(0.25..0.4),
                },
                perception: Perception { alpha, beta, noise_sd },
                responsiveness: rng.random_range(0.55..0.9),
                daily_responsiveness: Some(rng.random_range(0.7..0.95)),
                responsiveness_decay_per_week: 0.0,
                answer_delay_max_minutes: 30,
                wear: WearHours::default(),
                connectivity: Connectivity {
                    daily_outage_prob: 0.15,
                    outage_minutes_max: 150,
                    permanent_outage_from_day: None,
                },
                missing_window_prob: 0.02,
            }
        })
        .collect()
}
