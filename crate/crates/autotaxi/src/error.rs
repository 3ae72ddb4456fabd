use thiserror::Error;

use crate::conflict::AircraftId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("aircraft {0} appears more than once")]
    DuplicateAircraft(AircraftId),

    #[error("no priority given for aircraft {0}")]
    MissingPriority(AircraftId),

    #[error("no slot given for aircraft {0}")]
    MissingSlot(AircraftId),

    #[error("temporal advantage graph is cyclic")]
    CyclicGraph,

    #[error("longest walk from {start} covers {covered} of {total} aircraft")]
    IncompleteWalk {
        start: AircraftId,
        covered: usize,
        total: usize,
    },

    #[error("polynomial order {poly_order} cannot minimize derivative {derivative} (need order >= 2 * derivative)")]
    UnderParameterized { poly_order: usize, derivative: usize },

    #[error("waypoint times must be strictly increasing (index {index}: {prev} -> {next})")]
    NonIncreasingTimes { index: usize, prev: f64, next: f64 },

    #[error("singular KKT system: {0}")]
    SingularKkt(String),

    #[error("aircraft {aircraft} cannot reach zone {zone} by {requested:.3} s (earliest {earliest:.3} s)")]
    InfeasibleSlot {
        aircraft: AircraftId,
        zone: u32,
        requested: f64,
        earliest: f64,
    },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
}

pub(crate) fn ensure(cond: bool, name: &'static str, reason: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: reason(),
        })
    }
}
