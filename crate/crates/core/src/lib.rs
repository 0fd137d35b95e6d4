//! Sensing-driven just-in-time prompting for parents of active children.
//!
//! The crate is organized the way the deployed system is: a wearable
//! produces motion-energy windows ([`sensing`]), a per-family regression
//! maps them to how active the parent perceives the child to be
//! ([`calibration`]), a per-participant policy decides when to prompt
//! ([`policy`]), and a service ties ingestion, prompting, surveys and
//! persistence together ([`server`]). [`simkit`] drives the whole thing with
//! synthetic families on a virtual clock, and [`report`] renders the
//! resulting tables.

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod calibration;
pub mod cli;
pub mod policy;
pub mod report;
pub mod sensing;
pub mod server;
pub mod simkit;
pub mod time;

/// Opaque participant identifier assigned at registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(u32);

impl ParticipantId {
    pub const fn new(raw: u32) -> Self {
        ParticipantId(raw)
    }

    pub const fn get(self) -> u32 {
        self.0
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{:02}", self.0)
    }
}

impl std::str::FromStr for ParticipantId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let digits = s.strip_prefix('P').or_else(|| s.strip_prefix('p')).unwrap_or(s);
        digits.parse().map(ParticipantId)
    }
}
