//! Time sources: a virtual clock owned by the simulation engine and a wall
//! clock for live runs.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::Nanos;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    Virtual,
    Wall,
}

pub trait Clock {
    fn mode(&self) -> ClockMode;
    fn now(&self) -> Nanos;
}

/// Event-driven time. Only moves when the owner advances it.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Nanos,
}

impl VirtualClock {
    pub fn new() -> VirtualClock {
        VirtualClock::default()
    }

    pub fn advance_to(&mut self, t: Nanos) -> Result<()> {
        if t < self.now {
            return Err(Error::State(format!(
                "virtual clock cannot move backwards from {} to {}",
                self.now, t
            )));
        }
        self.now = t;
        Ok(())
    }
}

impl Clock for VirtualClock {
    fn mode(&self) -> ClockMode {
        ClockMode::Virtual
    }

    fn now(&self) -> Nanos {
        self.now
    }
}

/// Monotonic wall time measured from construction.
#[derive(Debug, Clone)]
pub struct WallClock {
    origin: Instant,
}

impl WallClock {
    pub fn start() -> WallClock {
        WallClock {
            origin: Instant::now(),
        }
    }

    pub fn origin(&self) -> Instant {
        self.origin
    }
}

impl Clock for WallClock {
    fn mode(&self) -> ClockMode {
        ClockMode::Wall
    }

    fn now(&self) -> Nanos {
        Nanos::from(self.origin.elapsed())
    }
}
