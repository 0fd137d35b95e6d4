use chrono::NaiveDate;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::profile::FamilyProfile;
use super::{substream, SimError};
use crate::sensing::{EnergyWindow, LookbackFeature, LOOKBACK_MS, WINDOW_MS};
use crate::time::{Timestamp, UtcOffset, DAY_MS};
use crate::ParticipantId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivityState {
    Calm,
    Active,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthState {
    pub participant_id: ParticipantId,
    pub window_start: Timestamp,
    pub state: ActivityState,
}

/// A generated child: the true state of every 5-minute step and the energy
/// windows the watch records while worn.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub participant_id: ParticipantId,
    /// Every step from the first local midnight to the end, in order.
    pub truth: Vec<GroundTruthState>,
    /// Worn steps only, in order. Unworn steps produce no window at all.
    pub windows: Vec<EnergyWindow>,
}

impl Trace {
    /// State of the step containing `t`.
    pub fn state_at(&self, t: Timestamp) -> Option<ActivityState> {
        let i = self.truth.partition_point(|g| g.window_start <= t);
        let g = self.truth.get(i.checked_sub(1)?)?;
        (t.millis_since(g.window_start) < WINDOW_MS).then_some(g.state)
    }

    /// State of the last step that ended at or before `t`.
    pub fn last_completed_state(&self, t: Timestamp) -> Option<ActivityState> {
        self.state_at(t.minus_millis(WINDOW_MS))
    }

    /// Lookback over every recorded window, delivered to the server or not.
    pub fn true_lookback(&self, as_of: Timestamp) -> LookbackFeature {
        let from = as_of.minus_millis(LOOKBACK_MS);
        let lo = self.windows.partition_point(|w| w.window_start < from);
        let hi = self.windows.partition_point(|w| w.window_start < as_of);
        crate::sensing::lookback_mean(&self.windows[lo..hi], as_of)
    }
}

/// Runs the two-state chain for `days` local days starting at `first_day`.
/// The first state is drawn from the chain's stationary distribution.
pub fn gen_trace(
    profile: &FamilyProfile,
    participant_id: ParticipantId,
    offset: UtcOffset,
    first_day: NaiveDate,
    days: u32,
    seed: u64,
) -> Result<Trace, SimError> {
    profile.validate()?;
    let law = &profile.energy_law;
    let calm = LogNormal::new(law.mu_calm.ln(), law.sigma_calm).map_err(|e| SimError::Profile(e.to_string()))?;
    let active = LogNormal::new(law.mu_active.ln(), law.sigma_active).map_err(|e| SimError::Profile(e.to_string()))?;
    let mut rng = substream(seed, "trace", participant_id.get());

    let start = offset.midnight(first_day).floor_to(WINDOW_MS);
    let steps = (days as i64 * DAY_MS / WINDOW_MS) as usize;
    let mut state = if rng.random::<f64>() < profile.markov.stationary_calm() {
        ActivityState::Calm
    } else {
        ActivityState::Active
    };
    let mut truth = Vec::with_capacity(steps);
    let mut windows = Vec::new();
    for k in 0..steps {
        let window_start = start.plus_millis(k as i64 * WINDOW_MS);
        if k > 0 {
            let flip = match state {
                ActivityState::Calm => profile.markov.p_calm_to_active,
                ActivityState::Active => profile.markov.p_active_to_calm,
            };
            if rng.random::<f64>() < flip {
                state = match state {
                    ActivityState::Calm => ActivityState::Active,
                    ActivityState::Active => ActivityState::Calm,
                };
            }
        }
        truth.push(GroundTruthState { participant_id, window_start, state });
        // draws happen for every step so wear settings do not shift the chain
        let energy = match state {
            ActivityState::Calm => calm.sample(&mut rng),
            ActivityState::Active => active.sample(&mut rng),
        };
        let missing = rng.random::<f64>() < profile.missing_window_prob;
        let local = window_start.local(offset);
        let hour = chrono::Timelike::hour(&local);
        if hour < profile.wear.start_hour || hour >= profile.wear.end_hour {
            continue;
        }
        windows.push(if missing {
            EnergyWindow::absent(participant_id, window_start)
        } else {
            EnergyWindow::present(participant_id, window_start, energy, 300)
        });
    }
    Ok(Trace { participant_id, truth, windows })
}
